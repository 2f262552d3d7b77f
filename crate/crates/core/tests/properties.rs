mod common;

use std::collections::BTreeSet;
use std::sync::OnceLock;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use salprune::baselines::{l1_importance, random_importance_set};
use salprune::data::{
    imbalance_ratio, render_dataset, select_class_balanced, AreaBuckets, BBox, DetectionSample, GenerateConfig,
};
use salprune::detector::{
    assign_targets, build_toy_detector, default_taps, detection_loss, Detector, LevelGeometry, LossWeights,
    NodeParams, ToyDetectorConfig,
};
use salprune::metrics::{average_precision, count_params, evaluate, iou, measured_cost, Detection, MatchConfig};
use salprune::pruner::{apply_plan, make_plan, PlanConfig};
use salprune::reweight::{build_reweight_mask, DecayKind, DecaySpec, ReweightConfig, ReweightMask};
use salprune::saliency::{
    channel_importance, channel_saliency, compute_importance, ImportanceConfig, ImportanceSet, ImportanceTable,
};
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

fn shared_model() -> &'static Detector<f64> {
    static M: OnceLock<Detector<f64>> = OnceLock::new();
    M.get_or_init(|| tiny(21))
}

fn arb_box(size: f64) -> impl Strategy<Value = BBox> {
    (0.0..size - 1.0, 0.0..size - 1.0, 0.5..size, 0.5..size, 0usize..3).prop_map(move |(x, y, w, h, c)| {
        let x1 = (x + w).min(size);
        let y1 = (y + h).min(size);
        BBox::new(x, y, x1.max(x + 0.25), y1.max(y + 0.25), c).unwrap()
    })
}

fn arb_decay() -> impl Strategy<Value = DecaySpec> {
    (
        prop_oneof![
            Just(DecayKind::Power),
            Just(DecayKind::Exponential),
            Just(DecayKind::FlatTopGaussian),
            Just(DecayKind::None)
        ],
        0.5f64..3.0,
        0.2f64..2.0,
        0.2f64..2.0,
    )
        .prop_map(|(kind, s, tau, sigma)| DecaySpec { kind, s, tau, sigma })
}

fn mask(boxes: &[BBox], n: usize, stride: usize, margin: f64, decay: DecaySpec) -> ReweightMask {
    build_reweight_mask("l", boxes, n, n, stride, &ReweightConfig { margin_ratio: margin, decay }).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_partitions(boxes in prop::collection::vec(arb_box(64.0), 0..4), margin in 0.0f64..1.0, decay in arb_decay()) {
        let m = mask(&boxes, 16, 4, margin, decay);
        for i in 0..m.beta.len() {
            let b = m.beta[i];
            prop_assert!((0.0..=1.0).contains(&b));
            if m.inside[i] { prop_assert_eq!(b, 1.0); }
            if !m.region[i] { prop_assert_eq!(b, 0.0); }
            if m.region[i] { prop_assert!(b > 0.0); }
        }
    }

    #[test]
    fn ring_is_monotone_along_rays(b in arb_box(64.0), margin in 0.0f64..1.0, decay in arb_decay()) {
        let n = 16usize;
        let m = mask(&[b], n, 4, margin, decay);
        let fp = salprune::reweight::box_footprint(&b, n, n, 4, margin);
        let (sx, sy) = (fp.center.0.floor() as i64, fp.center.1.floor() as i64);
        for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)] {
            let (mut x, mut y) = (sx.min(n as i64 - 1), sy.min(n as i64 - 1));
            let mut prev = f64::INFINITY;
            while (0..n as i64).contains(&x) && (0..n as i64).contains(&y) {
                let v = m.at(y as usize, x as usize);
                prop_assert!(v <= prev + 1e-15, "ray ({dx},{dy}) rose to {v} from {prev}");
                prev = v;
                x += dx;
                y += dy;
            }
        }
    }

    #[test]
    fn masks_combine_by_max(b1 in arb_box(64.0), b2 in arb_box(64.0), margin in 0.0f64..1.0, decay in arb_decay()) {
        let both = mask(&[b1, b2], 16, 4, margin, decay);
        let m1 = mask(&[b1], 16, 4, margin, decay);
        let m2 = mask(&[b2], 16, 4, margin, decay);
        for i in 0..both.beta.len() {
            prop_assert_eq!(both.beta[i], m1.beta[i].max(m2.beta[i]));
            prop_assert_eq!(both.region[i], m1.region[i] || m2.region[i]);
        }
    }

    #[test]
    fn stride_doubling_covers_the_same_region(b in arb_box(64.0)) {
        let fine = mask(&[b], 16, 4, 0.0, DecaySpec::default());
        let coarse = mask(&[b], 8, 8, 0.0, DecaySpec::default());
        let near = |m: &ReweightMask, n: usize, y: usize, x: usize| {
            (y.saturating_sub(1)..(y + 2).min(n)).any(|yy| (x.saturating_sub(1)..(x + 2).min(n)).any(|xx| m.inside[yy * n + xx]))
        };
        for y in 0..16 {
            for x in 0..16 {
                if fine.inside[y * 16 + x] {
                    prop_assert!(near(&coarse, 8, y / 2, x / 2));
                }
            }
        }
        for y in 0..8 {
            for x in 0..8 {
                if coarse.inside[y * 8 + x] {
                    let hit = (0..2).any(|a| (0..2).any(|c| near(&fine, 16, 2 * y + a, 2 * x + c)));
                    prop_assert!(hit);
                }
            }
        }
    }

    #[test]
    fn saliency_is_nonnegative_and_local(
        grad in prop::collection::vec(-5.0f64..5.0, 64),
        act in prop::collection::vec(-5.0f64..5.0, 64),
        noise in prop::collection::vec(-5.0f64..5.0, 64),
        b in arb_box(32.0),
    ) {
        let m = build_reweight_mask("l", &[b], 8, 8, 4, &ReweightConfig::default()).unwrap();
        let w = channel_saliency(&grad, &m).unwrap();
        prop_assert!(w >= 0.0);
        let s = channel_importance(w, &act, &m.region).unwrap().score;
        prop_assert!(s >= 0.0);
        let altered: Vec<f64> = (0..64).map(|i| if m.region[i] { grad[i] } else { noise[i] }).collect();
        prop_assert_eq!(channel_saliency(&altered, &m).unwrap(), w);
        let nonpos: Vec<f64> = grad.iter().map(|g| -g.abs()).collect();
        let w0 = channel_saliency(&nonpos, &m).unwrap();
        prop_assert_eq!(w0, 0.0);
        prop_assert_eq!(channel_importance(w0, &act, &m.region).unwrap().score, 0.0);
    }

    #[test]
    fn iou_symmetric_and_scale_invariant(a in arb_box(64.0), b in arb_box(64.0), c in 0.1f64..10.0) {
        prop_assert_eq!(iou(&a, &b), iou(&b, &a));
        let sa = a.scaled(c);
        let sb = b.scaled(c);
        prop_assert!((iou(&sa, &sb) - iou(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn l1_ignores_input_channel_order(w in prop::collection::vec(-1.0f64..1.0, 4 * 3 * 9), seed in 0u64..1000) {
        let mut perm: Vec<usize> = (0..3).collect();
        perm.shuffle(&mut rng(seed));
        let mut p = vec![0.0; w.len()];
        for o in 0..4 {
            for (i, &src) in perm.iter().enumerate() {
                let dst = (o * 3 + i) * 9;
                let from = (o * 3 + src) * 9;
                p[dst..dst + 9].copy_from_slice(&w[from..from + 9]);
            }
        }
        let a = l1_importance(&w, 4).unwrap().scores;
        let b = l1_importance(&p, 4).unwrap().scores;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn ap_ignores_order_of_equal_confidences(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let gts: salprune::data::Annotations = (0..3)
            .map(|i| (format!("i{i}"), (0..3).map(|_| random_box(&mut r, 64.0, 4.0, 30.0, 0)).collect()))
            .collect();
        let mut dets: Vec<Detection> = gts
            .iter()
            .flat_map(|(id, bs)| bs.iter().map(move |b| (id.clone(), *b)))
            .map(|(id, b)| Detection { sample_id: id, bbox: b.scaled(1.02), confidence: 0.5 })
            .collect();
        dets.push(Detection { sample_id: "i0".into(), bbox: random_box(&mut r, 64.0, 4.0, 30.0, 0), confidence: 0.5 });
        let cfg = MatchConfig::default();
        let base = average_precision(&dets, &gts, 0, (0.0, f64::INFINITY), &cfg);
        dets.shuffle(&mut r);
        prop_assert_eq!(average_precision(&dets, &gts, 0, (0.0, f64::INFINITY), &cfg), base);
    }

    #[test]
    fn area_buckets_partition_ground_truth(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let gts: salprune::data::Annotations = (0..4)
            .map(|i| (format!("i{i}"), (0..r.random_range(0..5)).map(|_| {
                let c = r.random_range(0..2);
                random_box(&mut r, 128.0, 2.0, 100.0, c)
            }).collect()))
            .collect();
        let total: usize = gts.values().map(Vec::len).sum();
        let s = evaluate(&[], &gts, 2, &AreaBuckets::for_image_size(128), &MatchConfig::default());
        prop_assert_eq!(s.gt_small + s.gt_medium + s.gt_large, total);
    }

    #[test]
    fn loss_ignores_box_order_and_scales_linearly(seed in 0u64..1000, lambda in 0.1f64..5.0) {
        let model = shared_model();
        let mut r = rng(seed);
        let s = random_sample(&mut r, "x", 64, 4, 3);
        let pred = model.predict(&s.image.cast()).unwrap();
        let geo = LevelGeometry::of_prediction(&pred);
        let w = LossWeights { cls: 1.0, bbox: lambda };
        let (l, _) = detection_loss(&pred, &[assign_targets(&s.boxes, &geo)], w).unwrap();
        let mut rev = s.boxes.clone();
        rev.reverse();
        let (lr, _) = detection_loss(&pred, &[assign_targets(&rev, &geo)], w).unwrap();
        prop_assert!((l.total - lr.total).abs() <= 1e-12 * l.total.abs().max(1.0));
        let (l2, _) = detection_loss(&pred, &[assign_targets(&s.boxes, &geo)], LossWeights { cls: 1.0, bbox: 2.0 * lambda }).unwrap();
        let box1 = l.total - l.cls_loss;
        let box2 = l2.total - l2.cls_loss;
        prop_assert!((box2 - 2.0 * box1).abs() <= 1e-12 * box1.abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn plans_are_deterministic_and_scale_free(seed in 0u64..1000, c in 0.01f64..100.0, rate in 0.05f64..0.75) {
        let model: Detector<f32> = tiny(seed);
        let g = model.graph();
        let taps = default_taps(g);
        let set = random_importance_set(g, &taps, seed).unwrap();
        let cfg = PlanConfig { rate, layers: None, input_size: (64, 64) };
        let a = make_plan(g, &set, &cfg).unwrap();
        let b = make_plan(g, &set.clone(), &cfg).unwrap();
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let mut scaled = set.clone();
        for t in scaled.tables.values_mut() {
            t.scores.iter_mut().for_each(|v| *v *= c);
        }
        let s = make_plan(g, &scaled, &cfg).unwrap();
        prop_assert_eq!(a.groups, s.groups);
    }

    #[test]
    fn pruned_models_run_and_match_predicted_cost(seed in 0u64..1000, rate in 0.1f64..0.7) {
        let model: Detector<f32> = tiny(seed);
        let g = model.graph();
        let set = random_importance_set(g, &default_taps(g), seed).unwrap();
        let plan = make_plan(g, &set, &PlanConfig { rate, layers: None, input_size: (64, 64) }).unwrap();
        let pruned = apply_plan(&model, &plan).unwrap();
        let (params, flops) = measured_cost(&pruned, 64, 64).unwrap();
        prop_assert_eq!(params, plan.predicted.params);
        prop_assert_eq!(flops, plan.predicted.flops);
        prop_assert_eq!(count_params(pruned.graph()), params);
        let x = Tensor::from_vec([1, 3, 64, 64], (0..3 * 64 * 64).map(|i| (i % 7) as f32 / 7.0).collect());
        prop_assert!(pruned.predict(&x).is_ok());
    }
}

#[test]
fn regeneration_is_bit_identical() {
    let cfg = GenerateConfig {
        n_images: 12,
        image_size: 64,
        seed: 9,
        ..Default::default()
    };
    let a = render_dataset(&cfg).unwrap();
    let b = render_dataset(&cfg).unwrap();
    assert_eq!(a.manifest, b.manifest);
    assert_eq!(serde_json::to_string(&a.annotations()).unwrap(), serde_json::to_string(&b.annotations()).unwrap());
    for (x, y) in a.samples.iter().zip(&b.samples) {
        assert_eq!(x.image.data(), y.image.data());
    }
}

#[test]
fn balanced_selection_beats_random_subsets() {
    let ds = render_dataset(&GenerateConfig {
        n_images: 200,
        image_size: 64,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let ann = ds.annotations();
    let ids: Vec<&String> = ann.keys().collect();
    let counts_of = |sel: &[String]| {
        let mut c = vec![0usize; 3];
        for id in sel {
            for b in &ann[id] {
                c[b.class_id] += 1;
            }
        }
        c
    };
    let mut wins = 0;
    for seed in 0..20 {
        let sel = select_class_balanced(&ann, 3, 30, seed).unwrap();
        let unique: BTreeSet<&String> = sel.sample_ids.iter().collect();
        assert_eq!(unique.len(), sel.sample_ids.len());
        assert!(sel.sample_ids.iter().all(|id| ann.contains_key(id)));
        let mut shuffled = ids.clone();
        shuffled.shuffle(&mut rng(1000 + seed));
        let random: Vec<String> = shuffled[..30].iter().map(|s| (*s).clone()).collect();
        let ours = imbalance_ratio(&counts_of(&sel.sample_ids), &[0, 1, 2]);
        let theirs = imbalance_ratio(&counts_of(&random), &[0, 1, 2]);
        if ours <= theirs {
            wins += 1;
        }
    }
    assert_eq!(wins, 20);
}

fn permute_stage1(model: &Detector<f64>, perm: &[usize]) -> Detector<f64> {
    let g = model.graph();
    let conv = g.require("stage1.conv").unwrap();
    let norm = g.require("stage1.norm").unwrap();
    let next = g.require("stage2.conv").unwrap();
    let mut m = model.clone();
    let c = perm.len();
    let params = m.params_mut();
    if let NodeParams::Conv { weight, bias } = &mut params[conv] {
        let per = weight.len() / c;
        let old = weight.clone();
        for (i, &src) in perm.iter().enumerate() {
            weight[i * per..(i + 1) * per].copy_from_slice(&old[src * per..(src + 1) * per]);
        }
        if let Some(b) = bias {
            let ob = b.clone();
            for (i, &src) in perm.iter().enumerate() {
                b[i] = ob[src];
            }
        }
    }
    if let NodeParams::Norm { gamma, beta, running_mean, running_var } = &mut params[norm] {
        for v in [gamma, beta, running_mean, running_var] {
            let o = v.clone();
            for (i, &src) in perm.iter().enumerate() {
                v[i] = o[src];
            }
        }
    }
    if let NodeParams::Conv { weight, .. } = &mut params[next] {
        let k2 = weight.len() / (g.node(next).out_channels * c);
        let old = weight.clone();
        for o in 0..g.node(next).out_channels {
            for (i, &src) in perm.iter().enumerate() {
                let dst = (o * c + i) * k2;
                let from = (o * c + src) * k2;
                weight[dst..dst + k2].copy_from_slice(&old[from..from + k2]);
            }
        }
    }
    m
}

#[test]
fn importance_follows_channel_permutation() {
    let model = shared_model();
    let mut r = rng(31);
    let samples: Vec<DetectionSample> = (0..2).map(|i| random_sample(&mut r, &format!("p{i}"), 64, 2, 3)).collect();
    let taps = vec!["stage1".to_string()];
    let cfg = ImportanceConfig::default();
    let base = compute_importance(model, &samples, &taps, &cfg).unwrap();
    let c = model.graph().node(model.graph().require("stage1.conv").unwrap()).out_channels;
    let mut perm: Vec<usize> = (0..c).collect();
    perm.shuffle(&mut r);
    let permuted = compute_importance(&permute_stage1(model, &perm), &samples, &taps, &cfg).unwrap();
    let a = &base.get("stage1.conv").unwrap().scores;
    let b = &permuted.get("stage1.conv").unwrap().scores;
    for (i, &src) in perm.iter().enumerate() {
        assert!((b[i] - a[src]).abs() < 1e-9, "channel {i}: {} vs {}", b[i], a[src]);
    }
}

#[test]
fn every_criterion_shares_the_table_schema() {
    let model: Detector<f32> = tiny(3);
    let taps = default_taps(model.graph());
    let sets = [
        salprune::baselines::l1_importance_set(&model, &taps).unwrap(),
        random_importance_set(model.graph(), &taps, 3).unwrap(),
        compute_importance(&model, &[random_sample(&mut rng(2), "q", 64, 2, 3)], &taps, &ImportanceConfig::default()).unwrap(),
    ];
    for set in &sets {
        let json = serde_json::to_value(set).unwrap();
        let tables = json["tables"].as_object().unwrap();
        for (layer, t) in tables {
            let obj = t.as_object().unwrap();
            let keys: BTreeSet<usize> = obj.keys().map(|k| k.parse().unwrap()).collect();
            assert_eq!(keys, (0..obj.len()).collect(), "{layer}");
            assert!(obj.values().all(|v| v.as_f64().unwrap() >= 0.0));
        }
        let back: ImportanceSet = serde_json::from_value(json).unwrap();
        back.check_against(model.graph()).unwrap();
        let _: &ImportanceTable = back.tables.values().next().unwrap();
    }
}
