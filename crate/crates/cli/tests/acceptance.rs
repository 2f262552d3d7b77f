//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! each and exits non-zero if any failed. Pass criterion numbers as arguments
//! to run a subset (`cargo test --test acceptance -- 2 7`).

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use salprune::baselines::{l1_importance_set, random_importance_set};
use salprune::data::{render_dataset, AreaBuckets, BBox, Dataset, GenerateConfig};
use salprune::detector::{build_toy_detector, default_taps, forward_with_taps, Detector, LossWeights, NodeParams, ToyDetectorConfig};
use salprune::metrics::{average_precision, measured_cost, Detection, MatchConfig};
use salprune::pipeline::PipelineConfig;
use salprune::pruner::{apply_plan, build_groups, make_plan, removal_count, PlanConfig};
use salprune::reweight::{build_reweight_mask, box_footprint, DecayKind, DecaySpec, ReweightConfig};
use salprune::saliency::{channel_importance, channel_saliency, compute_importance, ImportanceConfig, ImportanceSet, ImportanceTable};
use salprune::train::{evaluate_model, train, Checkpoint, TrainConfig};
use salprune::viz::{pixel_in_region, saliency_heatmaps};
use salprune::Tensor;

use common::*;

fn tiny<T: salprune::Scalar>(seed: u64) -> Detector<T> {
    build_toy_detector(&ToyDetectorConfig {
        n_classes: 3,
        width_multiplier: 0.25,
        seed,
    })
    .unwrap()
}

/// Central differences of the detection loss against captured tap gradients.
fn gradient_oracle() -> String {
    let model: Detector<f64> = tiny(7);
    let params = model.num_parameters();
    assert!(params <= 10_000, "{params} parameters");
    let mut r = rng(101);
    let taps = default_taps(model.graph());
    let weights = LossWeights::default();
    let eps = 1e-4;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for s in 0..2 {
        let sample = random_sample(&mut r, &format!("fd{s}"), 64, 2 + s, 3);
        let pass = forward_with_taps(&model, &sample, &taps, weights, 1.0).unwrap();
        for _ in 0..12 {
            let t = &pass.taps[r.random_range(0..pass.taps.len())];
            let node = model.graph().resolve_tap(&t.node).unwrap();
            let coord = r.random_range(0..t.gradient.data().len());
            let an = t.gradient.data()[coord];
            let fd = (perturbed_loss(&model, &sample, node, coord, eps, weights)
                - perturbed_loss(&model, &sample, node, coord, -eps, weights))
                / (2.0 * eps);
            if an.abs() < 1e-4 {
                assert!((fd - an).abs() < 1e-6, "{}[{coord}] fd {fd} analytic {an}", t.node);
            } else {
                let rel = (fd - an).abs() / an.abs().max(fd.abs());
                worst = worst.max(rel);
                assert!(rel < 1e-3, "{}[{coord}] fd {fd} analytic {an} rel {rel}", t.node);
            }
            checked += 1;
        }
    }
    format!("{checked} coordinates, {params} params, worst rel err {worst:.2e}")
}

/// Masks, saliency and importance against per-cell scalar evaluation.
fn formula_equivalence() -> String {
    let mut r = rng(102);
    let kinds = [DecayKind::Power, DecayKind::Exponential, DecayKind::FlatTopGaussian, DecayKind::None];
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let stride = [1usize, 2, 4, 8][r.random_range(0..4)];
        let (h, w) = (r.random_range(2..=32), r.random_range(2..=32));
        let (ih, iw) = ((h * stride) as f64, (w * stride) as f64);
        let boxes: Vec<BBox> = (0..r.random_range(0..=3))
            .map(|_| {
                let bw = r.random_range(0.5..=iw);
                let bh = r.random_range(0.5..=ih);
                let x = r.random_range(0.0..=iw - bw);
                let y = r.random_range(0.0..=ih - bh);
                BBox::new(x, y, x + bw, y + bh, 0).unwrap()
            })
            .collect();
        let decay = DecaySpec {
            kind: kinds[case % 4],
            s: r.random_range(0.5..3.0),
            ..DecaySpec::default()
        };
        let margin = r.random_range(0.0..0.8);
        let mask = build_reweight_mask("l", &boxes, h, w, stride, &ReweightConfig { margin_ratio: margin, decay }).unwrap();
        let (beta, region) = oracle_mask(&boxes, h, w, stride, margin, &decay);
        assert_eq!(mask.region, region, "case {case}: region");
        for (a, b) in mask.beta.iter().zip(&beta) {
            worst = worst.max((a - b).abs());
        }
        let grad: Vec<f64> = (0..h * w).map(|_| r.random_range(-1.0..1.0)).collect();
        let act: Vec<f64> = (0..h * w).map(|_| r.random_range(-0.5..2.0)).collect();
        let ws = channel_saliency(&grad, &mask).unwrap();
        let wo = oracle_saliency(&grad, &beta);
        worst = worst.max((ws - wo).abs());
        let s = channel_importance(ws, &act, &mask.region).unwrap().score;
        worst = worst.max((s - oracle_importance(wo, &act, &region)).abs());
    }
    assert!(worst <= 1e-9, "max deviation {worst:e}");
    format!("100 configurations, max deviation {worst:.1e}")
}

/// In-box, ring and off-region values plus ray monotonicity.
fn mask_partition() -> String {
    let mut r = rng(103);
    let mut violations = Vec::new();
    let n = 24usize;
    for case in 0..200 {
        let stride = 4;
        let size = (n * stride) as f64;
        let boxes: Vec<BBox> = (0..r.random_range(1..=3))
            .map(|_| random_box(&mut r, size, 1.0, size * 0.6, 0))
            .collect();
        let decay = DecaySpec {
            kind: [DecayKind::Power, DecayKind::Exponential, DecayKind::FlatTopGaussian, DecayKind::None][case % 4],
            s: r.random_range(0.5..3.0),
            tau: r.random_range(0.2..2.0),
            sigma: r.random_range(0.2..2.0),
        };
        let cfg = ReweightConfig {
            margin_ratio: r.random_range(0.0..1.0),
            decay,
        };
        let m = build_reweight_mask("l", &boxes, n, n, stride, &cfg).unwrap();
        for i in 0..n * n {
            let b = m.beta[i];
            let ok = if m.inside[i] {
                b == 1.0
            } else if m.region[i] {
                b > 0.0 && b <= 1.0
            } else {
                b == 0.0
            };
            if !ok {
                violations.push(format!("case {case} cell {i}: beta {b}"));
            }
        }
        let single = build_reweight_mask("l", &boxes[..1], n, n, stride, &cfg).unwrap();
        let fp = box_footprint(&boxes[0], n, n, stride, cfg.margin_ratio);
        let (sx, sy) = (fp.center.0.floor() as i64, fp.center.1.floor() as i64);
        for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)] {
            let (mut x, mut y) = (sx.min(n as i64 - 1), sy.min(n as i64 - 1));
            let mut prev = f64::INFINITY;
            while (0..n as i64).contains(&x) && (0..n as i64).contains(&y) {
                let v = single.at(y as usize, x as usize);
                if v > prev {
                    violations.push(format!("case {case}: ray ({dx},{dy}) rises {prev} -> {v}"));
                }
                prev = v;
                x += dx;
                y += dy;
            }
        }
    }
    assert!(violations.is_empty(), "{} violations, first: {}", violations.len(), violations[0]);
    "200 masks, 0 violations".into()
}

fn removed_sets(plan: &salprune::pruner::PruningPlan) -> BTreeMap<String, Vec<usize>> {
    plan.groups.iter().map(|g| (g.members[0].clone(), g.remove.clone())).collect()
}

/// Loss scaling by 0.1 and 10 leaves the pruned channels unchanged.
fn ranking_invariance() -> String {
    let mut r = rng(104);
    for trial in 0..20 {
        let model: Detector<f64> = tiny(trial);
        let samples: Vec<_> = (0..2)
            .map(|i| random_sample(&mut r, &format!("t{trial}-{i}"), 64, 1 + (i + trial as usize) % 3, 3))
            .collect();
        let taps = default_taps(model.graph());
        let rate = r.random_range(0.1..0.7);
        let plan_for = |scale: f64| {
            let cfg = ImportanceConfig {
                loss_scale: scale,
                ..Default::default()
            };
            let set = compute_importance(&model, &samples, &taps, &cfg).unwrap();
            make_plan(
                model.graph(),
                &set,
                &PlanConfig {
                    rate,
                    layers: None,
                    input_size: (64, 64),
                },
            )
            .unwrap()
        };
        let base = removed_sets(&plan_for(1.0));
        for c in [0.1, 10.0] {
            assert_eq!(removed_sets(&plan_for(c)), base, "trial {trial}, scale {c}");
        }
    }
    "20 trials x scales {0.1, 10}: identical channel sets".into()
}

/// Removing channels that were already dead leaves the outputs unchanged.
fn zero_channel_exactness() -> String {
    let mut r = rng(105);
    let mut worst: f64 = 0.0;
    for trial in 0..6u64 {
        let mut model: Detector<f32> = build_toy_detector(&ToyDetectorConfig {
            n_classes: 3,
            width_multiplier: 0.5,
            seed: trial,
        })
        .unwrap();
        let graph = model.graph().clone();
        let rate = [0.1, 0.2, 0.3][trial as usize % 3];
        let mut tables = BTreeMap::new();
        let mut dead: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
        for g in build_groups(&graph).unwrap().iter().filter(|g| g.prunable) {
            let k = removal_count(g.width, rate);
            let mut idx: Vec<usize> = (0..g.width).collect();
            idx.shuffle(&mut r);
            let chosen: BTreeSet<usize> = idx[..k].iter().copied().collect();
            for m in &g.members {
                let scores = (0..g.width)
                    .map(|c| if chosen.contains(&c) { 0.0 } else { r.random_range(0.5..1.0) })
                    .collect();
                tables.insert(m.clone(), ImportanceTable { scores });
                dead.insert(m.clone(), chosen.clone());
            }
        }
        for (conv, chans) in &dead {
            let ci = graph.require(conv).unwrap();
            let norm = graph.require(&conv.replace(".conv", ".norm")).unwrap();
            let width = graph.node(ci).out_channels;
            let params = model.params_mut();
            if let NodeParams::Conv { weight, bias } = &mut params[ci] {
                let per = weight.len() / width;
                for &c in chans {
                    weight[c * per..(c + 1) * per].iter_mut().for_each(|v| *v = 0.0);
                    if let Some(b) = bias {
                        b[c] = 0.0;
                    }
                }
            }
            if let NodeParams::Norm { gamma, beta, .. } = &mut params[norm] {
                for &c in chans {
                    gamma[c] = 0.0;
                    beta[c] = 0.0;
                }
            }
        }
        let set = ImportanceSet {
            meta: salprune::saliency::ImportanceMeta {
                criterion: "dead".into(),
                n_samples: 0,
                n_skipped: 0,
                seed: None,
                settings: None,
            },
            tables,
        };
        let plan = make_plan(
            &graph,
            &set,
            &PlanConfig {
                rate,
                layers: None,
                input_size: (64, 64),
            },
        )
        .unwrap();
        for g in &plan.groups {
            let want: Vec<usize> = dead[&g.members[0]].iter().copied().collect();
            assert_eq!(g.remove, want, "{:?}", g.members);
        }
        let pruned = apply_plan(&model, &plan).unwrap();
        for _ in 0..10 {
            let x = Tensor::from_vec([1, 3, 64, 64], (0..3 * 64 * 64).map(|_| r.random::<f32>()).collect());
            let d = model.predict(&x).unwrap().max_abs_diff(&pruned.predict(&x).unwrap());
            worst = worst.max(d);
        }
    }
    assert!(worst < 1e-5, "max output change {worst:e}");
    format!("6 models x 10 inputs, rates up to 0.3, max |diff| {worst:.1e}")
}

/// Recounted cost equals plan prediction and falls strictly with the rate.
fn cost_accounting() -> String {
    let model: Detector<f32> = build_toy_detector(&ToyDetectorConfig::default()).unwrap();
    let g = model.graph();
    let set = l1_importance_set(&model, &default_taps(g)).unwrap();
    let mut prev = (u64::MAX, u64::MAX);
    let mut out = Vec::new();
    for rate in [0.1, 0.3, 0.5, 0.7] {
        let plan = make_plan(
            g,
            &set,
            &PlanConfig {
                rate,
                layers: None,
                input_size: (128, 128),
            },
        )
        .unwrap();
        let pruned = apply_plan(&model, &plan).unwrap();
        let (p, f) = measured_cost(&pruned, 128, 128).unwrap();
        assert_eq!((p, f), (plan.predicted.params, plan.predicted.flops), "rate {rate}");
        assert!(p < prev.0 && f < prev.1, "rate {rate}: not strictly decreasing");
        prev = (p, f);
        out.push(format!("r={rate}: {p}/{f}"));
    }
    out.join(", ")
}

/// AP against a brute-force PR construction, plus the hand example.
fn ap_oracle() -> String {
    let mut r = rng(107);
    let cfg = MatchConfig::default();
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let mut gts = BTreeMap::new();
        let mut dets = Vec::new();
        for i in 0..1 + case % 4 {
            let id = format!("m{i}");
            let boxes: Vec<BBox> = (0..r.random_range(1..4))
                .map(|_| {
                    let c = r.random_range(0..2);
                    random_box(&mut r, 48.0, 4.0, 24.0, c)
                })
                .collect();
            for b in &boxes {
                if r.random_bool(0.75) {
                    let dx = r.random_range(-3.0..3.0);
                    let dy = r.random_range(-3.0..3.0);
                    dets.push(Detection {
                        sample_id: id.clone(),
                        bbox: BBox::new(b.x_min + dx, b.y_min + dy, b.x_max + dx, b.y_max + dy, b.class_id).unwrap(),
                        confidence: r.random_range(0.0..1.0),
                    });
                }
            }
            for _ in 0..r.random_range(0..3) {
                let c = r.random_range(0..2);
                dets.push(Detection {
                    sample_id: id.clone(),
                    bbox: random_box(&mut r, 48.0, 4.0, 24.0, c),
                    confidence: r.random_range(0.0..1.0),
                });
            }
            gts.insert(id, boxes);
        }
        for class in 0..2 {
            match (
                average_precision(&dets, &gts, class, (0.0, f64::INFINITY), &cfg),
                oracle_ap(&dets, &gts, class, 0.5),
            ) {
                (None, None) => {}
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                other => panic!("case {case} class {class}: {other:?}"),
            }
        }
    }
    assert!(worst <= 1e-6, "max deviation {worst:e}");
    let g1 = BBox::new(0.0, 0.0, 10.0, 10.0, 0).unwrap();
    let g2 = BBox::new(20.0, 20.0, 30.0, 30.0, 0).unwrap();
    let gts = [("a".to_string(), vec![g1, g2])].into_iter().collect();
    let d = |b: BBox, c: f64| Detection {
        sample_id: "a".into(),
        bbox: b,
        confidence: c,
    };
    let dets = [d(g1, 0.9), d(BBox::new(40.0, 40.0, 50.0, 50.0, 0).unwrap(), 0.8), d(g2, 0.7)];
    let ap = average_precision(&dets, &gts, 0, (0.0, f64::INFINITY), &cfg).unwrap();
    let hand = (51.0 + 50.0 * (2.0 / 3.0)) / 101.0;
    assert!((ap - hand).abs() < 1e-12, "hand example: {ap} vs {hand}");
    format!("50 scenes, max deviation {worst:.1e}; hand example {ap:.6}")
}

struct Comparison {
    map: f64,
    ap_small: f64,
}

/// Saliency vs L1 vs random at rate 0.5 with equal fine-tuning, 3 seeds.
fn comparative_pruning() -> String {
    let size = 128;
    let train_set = render_dataset(&GenerateConfig {
        n_images: 600,
        image_size: size,
        seed: 1,
        ..Default::default()
    })
    .unwrap();
    let val = render_dataset(&GenerateConfig {
        split: "val".into(),
        n_images: 200,
        image_size: size,
        seed: 2,
        ..Default::default()
    })
    .unwrap();
    let buckets = AreaBuckets::for_image_size(size);
    let mut ckpt = Checkpoint::fresh(build_toy_detector(&ToyDetectorConfig::default()).unwrap());
    let base_cfg = TrainConfig {
        epochs: 30,
        lr: 0.02,
        warmup_epochs: 1,
        ..Default::default()
    };
    train(&mut ckpt, &train_set.samples, &base_cfg, |_| {}).unwrap();
    let baseline = ckpt.model;
    let (base_eval, _) = evaluate_model(&baseline, &val.samples, 3, &buckets).unwrap();
    let base_small = base_eval.ap_small.unwrap();
    println!("    baseline mAP {:.4} AP-s {:.4}", base_eval.map.unwrap(), base_small);

    let defaults = PipelineConfig::default();
    let taps = default_taps(baseline.graph());
    let mut results: BTreeMap<&str, Vec<Comparison>> = BTreeMap::new();
    for seed in 0..3u64 {
        let sel = salprune::data::select_class_balanced(&train_set.annotations(), 3, defaults.n_samples, seed).unwrap();
        let samples = train_set.subset(&sel.sample_ids).unwrap();
        for crit in ["saliency", "l1", "random"] {
            let set = match crit {
                "saliency" => compute_importance(&baseline, &samples, &taps, &defaults.importance).unwrap(),
                "l1" => l1_importance_set(&baseline, &taps).unwrap(),
                _ => random_importance_set(baseline.graph(), &taps, seed).unwrap(),
            };
            let plan = make_plan(
                baseline.graph(),
                &set,
                &PlanConfig {
                    rate: 0.5,
                    layers: None,
                    input_size: (size, size),
                },
            )
            .unwrap();
            let mut pc = Checkpoint::fresh(apply_plan(&baseline, &plan).unwrap());
            let ft = TrainConfig {
                epochs: 3,
                seed,
                ..Default::default()
            };
            train(&mut pc, &train_set.samples, &ft, |_| {}).unwrap();
            let (e, _) = evaluate_model(&pc.model, &val.samples, 3, &buckets).unwrap();
            println!(
                "    seed {seed} {crit:<8} mAP {:.4} AP-s {:.4}",
                e.map.unwrap(),
                e.ap_small.unwrap()
            );
            results.entry(crit).or_default().push(Comparison {
                map: e.map.unwrap(),
                ap_small: e.ap_small.unwrap(),
            });
        }
    }
    let mean = |k: &str| results[k].iter().map(|c| c.map).sum::<f64>() / 3.0;
    let (s, l, rnd) = (mean("saliency"), mean("l1"), mean("random"));
    let summary = format!("mean mAP saliency {s:.4}, l1 {l:.4}, random {rnd:.4}");
    let mut failures = Vec::new();
    if s < l {
        failures.push(format!("saliency below L1 by {:.4}", l - s));
    }
    if s - rnd < 0.02 {
        failures.push(format!("saliency leads random by only {:.4}", s - rnd));
    }
    for (i, (a, b)) in results["saliency"].iter().zip(&results["random"]).enumerate() {
        let (ds, dr) = (base_small - a.ap_small, base_small - b.ap_small);
        if ds > dr {
            failures.push(format!("seed {i}: AP-s deficit {ds:.4} exceeds random's {dr:.4}"));
        }
    }
    assert!(failures.is_empty(), "{summary}; {}", failures.join("; "));
    summary
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_salprune"))
}

fn run(cmd: &mut Command) -> String {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "{:?} failed: {}",
        cmd,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Small datasets and a briefly trained checkpoint, produced through the CLI.
struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    train: PathBuf,
    val: PathBuf,
    ckpt: PathBuf,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let (train, val) = (root.join("train"), root.join("val"));
    for (path, split, n, seed) in [(&train, "train", "130", "1"), (&val, "val", "24", "2")] {
        run(bin()
            .args(["data", "gen", "--split", split, "--n-images", n, "--image-size", "64", "--seed", seed])
            .arg("--out")
            .arg(path));
    }
    let out = root.join("baseline");
    run(bin()
        .args(["train", "--epochs", "2", "--width", "0.25", "--batch-size", "16"])
        .arg("--train-data")
        .arg(&train)
        .arg("--val-data")
        .arg(&val)
        .arg("--out")
        .arg(&out));
    Workspace {
        ckpt: out.join("checkpoint.json"),
        _dir: dir,
        root,
        train,
        val,
    }
}

fn ablate(ws: &Workspace, study: &str, extra: &[&str]) -> Vec<Vec<String>> {
    let out = ws.root.join(format!("ablate-{study}"));
    run(bin()
        .args(["ablate", study, "--epochs", "1", "--n-samples", "8", "--rate", "0.3"])
        .args(extra)
        .arg("--checkpoint")
        .arg(&ws.ckpt)
        .arg("--train-data")
        .arg(&ws.train)
        .arg("--val-data")
        .arg(&ws.val)
        .arg("--out")
        .arg(&out));
    let svg = std::fs::read_to_string(out.join("ablation.svg")).unwrap();
    assert!(svg.starts_with("<svg"), "{study}: plot missing");
    assert!(out.join("config.json").exists());
    std::fs::read_to_string(out.join("ablation.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

/// Ablation studies emit the expected arms, CSV and plot.
fn ablation_harness(ws: &Workspace) -> String {
    let comp = ablate(ws, "components", &[]);
    let arms: Vec<&str> = comp.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(arms, ["unpruned", "gradients", "gradients+box", "gradients+box+context"]);
    assert_eq!(comp[0][2], "0", "unpruned arm has rate 0");
    let decay = ablate(ws, "decay", &[]);
    let arms: Vec<&str> = decay.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(arms, ["none", "flat_top_gaussian", "exponential", "power"]);
    let sizes = ablate(ws, "sample_size", &["--grid", "8,16,32,64,128"]);
    let n: Vec<&str> = sizes.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(n, ["8", "16", "32", "64", "128"]);
    for row in comp.iter().chain(&decay).chain(&sizes) {
        let map: f64 = row[8].parse().unwrap();
        assert!((0.0..=1.0).contains(&map));
    }
    let bad = bin().args(["ablate", "pruning"]).arg("--checkpoint").arg(&ws.ckpt).output().unwrap();
    assert_eq!(bad.status.code(), Some(2), "unknown study is a usage error");
    "components 4 arms, decay 4 arms, sample_size 5 points, unknown study rejected".into()
}

/// Overlay pairs differ only inside the relaxed boxes.
fn viz_locality(ws: &Workspace) -> String {
    let ds = Dataset::load(&ws.val).unwrap();
    let sample = ds.samples.iter().find(|s| !s.boxes.is_empty()).unwrap();
    let out = ws.root.join("viz");
    let printed = run(bin()
        .args(["viz", "--layer", "neck8.c2", "--channels", "0,1"])
        .arg("--checkpoint")
        .arg(&ws.ckpt)
        .arg("--data")
        .arg(&ws.val)
        .arg("--sample")
        .arg(&sample.sample_id)
        .arg("--out")
        .arg(&out));
    assert_eq!(printed.lines().count(), 4, "two channels x two modes");
    let model = Checkpoint::load(&ws.ckpt).unwrap().model;
    let maps = saliency_heatmaps(&model, sample, "neck8.c2", &[0, 1], &ImportanceConfig::default()).unwrap();
    let mut checked = 0usize;
    for (k, pair) in [0, 1].iter().zip(maps.chunks(2)) {
        let load = |mode: &str| image::open(out.join(format!("neck8_c2_c{k}_{mode}.png"))).unwrap().to_rgb8();
        let (off, on) = (load("off"), load("on"));
        assert_eq!(off.dimensions(), on.dimensions());
        for (x, y, p) in off.enumerate_pixels() {
            if !pixel_in_region(&pair[1], x, y) {
                assert_eq!(p, on.get_pixel(x, y), "channel {k} pixel ({x},{y}) outside the region differs");
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
    format!("2 channels, {checked} off-region pixels identical")
}

fn main() {
    let wanted: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| wanted.is_empty() || wanted.contains(&n);
    type Check<'a> = Box<dyn Fn() -> String + 'a>;
    let ws = std::cell::OnceCell::new();
    let ws = &ws;
    let criteria: Vec<(usize, &str, Check<'_>)> = vec![
        (1, "gradient oracle", Box::new(gradient_oracle)),
        (2, "formula brute-force equivalence", Box::new(formula_equivalence)),
        (3, "mask partition", Box::new(mask_partition)),
        (4, "ranking invariance under loss scaling", Box::new(ranking_invariance)),
        (5, "zero-channel pruning exactness", Box::new(zero_channel_exactness)),
        (6, "cost accounting", Box::new(cost_accounting)),
        (7, "AP oracle", Box::new(ap_oracle)),
        (8, "comparative pruning experiment", Box::new(comparative_pruning)),
        (9, "ablation harness", Box::new(move || ablation_harness(ws.get_or_init(workspace)))),
        (10, "saliency overlay locality", Box::new(move || viz_locality(ws.get_or_init(workspace)))),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = Vec::new();
    for (n, name, check) in &criteria {
        if !want(*n) {
            continue;
        }
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(check));
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("PASS  {n:>2}. {name} ({secs:.1}s): {detail}"),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("FAIL  {n:>2}. {name} ({secs:.1}s): {msg}");
                failed.push(*n);
            }
        }
    }
    if !failed.is_empty() {
        println!("acceptance: {} failed: {failed:?}", failed.len());
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria passed");
}

