//! Acceptance harness: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p attnlab --test acceptance`. Set
//! `ACCEPTANCE_ONLY=1,3,9` to run a subset.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::{Duration, Instant};

use attnlab::backbone::{enumerate_positions, BackboneConfig, InsertionPlan, Model, CLASSIFIER_WEIGHT};
use attnlab::blocks::{
    attention_forward, bottleneck_forward, force_identity, init_bottleneck, AttentionKind, AttentionSpec, BottleneckSpec,
};
use attnlab::checkpoint::write_checkpoint;
use attnlab::cost::{attention_block_macs, benchmark_latency, count_macs, pareto_filter, BenchConfig, CostReport};
use attnlab::data::{generate_synthetic, Dataset, SyntheticConfig};
use attnlab::eval::{brute_force_ap_oracle, evaluate, evaluate_model, relevance, Metric, Relevance};
use attnlab::nas::{
    derive_rules_report, run_pipeline, write_trials, Anchor, PlantedObjective, Search, SearchSpace, SpeedModel, TrialResult,
};
use attnlab::nn::{Mode, ParamStore, Session};
use attnlab::report::{scatter_svg, to_json};
use attnlab::tensor::{grad_check_many, Graph, Tensor};
use attnlab::training::{circle_loss, cross_entropy_ls, finetune_classifier, finetune_two_step, train, LossKind, TrainConfig, TrainLog};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{block_grad_error, circle_oracle, circle_value, instance, naive_conv, random_labels, rows, store_for};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, t: Instant) -> Result<(), String> {
    let e = t.elapsed();
    check(e <= limit, || format!("runtime {:.1}s exceeds {:.0}s", e.as_secs_f64(), limit.as_secs_f64()))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// 1 ------------------------------------------------------------------------

fn gradients() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    for kind in AttentionKind::ALL {
        for seed in 0..10 {
            let spec = AttentionSpec::new(kind).with_reduction(4);
            let store = store_for(&spec, 8, seed);
            let x = Tensor::rand_uniform(&[2, 8, 2, 3], -1.0, 1.0, &mut rng(seed + 50));
            let run = |s: &mut Session<'_, f64>, x| attention_forward(s, "a", &spec, x).unwrap();
            let err = block_grad_error(&store, &x, Mode::Eval, &run);
            check(err < 1e-3, || format!("{kind} seed {seed}: {err:e}"))?;
            worst = worst.max(err);
        }
    }
    for seed in 0..10 {
        let downsample = seed % 2 == 0;
        let spec = BottleneckSpec {
            in_channels: if downsample { 4 } else { 8 },
            planes: 2,
            stride: if seed % 4 == 0 { 2 } else { 1 },
            downsample,
            se: (seed % 3 == 0).then(|| AttentionSpec::new(AttentionKind::Se).with_reduction(4)),
        };
        let mut store = ParamStore::new();
        init_bottleneck(&mut store, "b", &spec, &mut rng(seed)).unwrap();
        let x = Tensor::rand_uniform(&[3, spec.in_channels, 4, 3], -1.0, 1.0, &mut rng(seed + 7));
        let run = |s: &mut Session<'_, f64>, x| bottleneck_forward(s, "b", &spec, x).unwrap();
        let err = block_grad_error(&store, &x, Mode::Train, &run);
        check(err < 1e-3, || format!("bottleneck seed {seed}: {err:e}"))?;
        worst = worst.max(err);
    }
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let f = Tensor::rand_uniform(&[6, 4], -1.0, 1.0, &mut r);
        let labels = random_labels(6, 3, &mut r);
        for gamma in [4.0, 32.0, 128.0] {
            let l = labels.clone();
            let err = grad_check_many(
                move |g, v| {
                    let z = g.l2_normalize_rows(v[0])?;
                    circle_loss(g, z, &l, gamma, 0.25)
                },
                std::slice::from_ref(&f),
                1e-6,
            )
            .map_err(|e| e.to_string())?;
            check(err < 1e-3, || format!("circle γ={gamma} seed {seed}: {err:e}"))?;
            worst = worst.max(err);
        }
        let logits = Tensor::rand_uniform(&[6, 5], -2.0, 2.0, &mut r);
        let labels: Vec<usize> = (0..6).map(|_| r.gen_range(0..5)).collect();
        for eps in [0.0, 0.1] {
            let l = labels.clone();
            let err = grad_check_many(move |g, v| cross_entropy_ls(g, v[0], &l, eps), std::slice::from_ref(&logits), 1e-6)
                .map_err(|e| e.to_string())?;
            check(err < 1e-3, || format!("cross-entropy ε={eps} seed {seed}: {err:e}"))?;
            worst = worst.max(err);
        }
    }
    within(Duration::from_secs(120), t)?;
    Ok(format!("4 blocks, bottleneck, circle and cross-entropy × 10 seeds; worst relative error {worst:.2e}"))
}

// 2 ------------------------------------------------------------------------

fn feature_bits(m: &Model<f32>, x: &Tensor<f32>) -> Vec<u32> {
    m.forward_features(x).unwrap().data().iter().map(|v| v.to_bits()).collect()
}

fn identities() -> Outcome {
    let t = Instant::now();
    let mut checked = 0;
    for cfg in [BackboneConfig::desk(10), BackboneConfig::default()] {
        let (h, w) = cfg.input_hw;
        let n = if cfg.width_divisor == 1 { 1 } else { 2 };
        let x = Tensor::<f32>::rand_uniform(&[n, 3, h, w], -1.0, 1.0, &mut rng(2));
        let base = Model::<f32>::new(cfg.clone(), InsertionPlan::empty(), 4).unwrap();
        let want = feature_bits(&base, &x);
        let (nl_plans, gate_plans): (&[&str], &[&str]) = if cfg.width_divisor == 1 {
            (&["nl@1+nl@17"], &["se@2+hac@9+cnl@6,8,14"])
        } else {
            (
                &["nl@1", "nl@5,9", "nl@17", "nl@2,3,4,14"],
                &["se:4@1", "se@3,7,12", "hac@2,6", "hac@17", "cnl@6,8,14", "cnl:4@1+cnl@16", "se@4+cnl@6+hac@10"],
            )
        };
        for plan in nl_plans {
            let m = Model::<f32>::new(cfg.clone(), plan.parse().unwrap(), 4).unwrap();
            check(feature_bits(&m, &x) == want, || format!("zero-init {plan} changed features"))?;
            checked += 1;
        }
        for plan in gate_plans {
            let mut m = Model::<f32>::new(cfg.clone(), plan.parse().unwrap(), 4).unwrap();
            for (p, spec) in m.plan.entries.clone() {
                let prefix = m.attention_prefix(p).unwrap();
                force_identity(&mut m.store, &prefix, spec.kind);
            }
            check(feature_bits(&m, &x) == want, || format!("unit-gate {plan} changed features"))?;
            checked += 1;
        }
    }
    within(Duration::from_secs(60), t)?;
    Ok(format!("{checked} plans bit-identical to the baseline at desk and full scale"))
}

// 3 ------------------------------------------------------------------------

fn oracles() -> Outcome {
    let mut r = rng(0);
    let mut scored = 0;
    for i in 0..1000 {
        let inst = instance(&mut r);
        let ng = inst.g_ids.len();
        let oracle: Vec<(usize, f64)> = (0..inst.q_ids.len())
            .filter_map(|q| {
                let row = &inst.dist.data()[q * ng..(q + 1) * ng];
                let flags: Vec<Relevance> = (0..ng)
                    .map(|g| relevance(inst.q_ids[q], inst.q_cams[q], inst.g_ids[g], inst.g_cams[g]))
                    .collect();
                brute_force_ap_oracle(row, &flags).map(|ap| (q, ap))
            })
            .collect();
        match evaluate(&inst.dist, &inst.q_ids, &inst.q_cams, &inst.g_ids, &inst.g_cams) {
            Ok(res) => {
                let got: Vec<(usize, f64)> = res.per_query_ap.iter().map(|q| (q.query, q.ap)).collect();
                check(got == oracle, || format!("instance {i}: per-query AP differs"))?;
                let mean = oracle.iter().map(|o| o.1).sum::<f64>() / oracle.len() as f64;
                check(res.map == mean, || format!("instance {i}: mAP {} vs {mean}", res.map))?;
                scored += 1;
            }
            Err(_) => check(oracle.is_empty(), || format!("instance {i}: evaluate refused a scorable instance"))?,
        }
    }

    let mut conv_worst = 0.0f32;
    for (xs, ws, stride, pad) in [
        ([2, 3, 8, 6], [5, 3, 3, 3], 1, 1),
        ([1, 4, 9, 7], [2, 4, 3, 3], 2, 1),
        ([3, 3, 16, 8], [8, 3, 7, 7], 2, 3),
        ([2, 6, 5, 5], [3, 6, 1, 1], 1, 0),
        ([2, 6, 6, 4], [3, 6, 1, 1], 2, 0),
    ] {
        let x = Tensor::<f32>::rand_uniform(&xs, -1.0, 1.0, &mut r);
        let w = Tensor::<f32>::rand_uniform(&ws, -1.0, 1.0, &mut r);
        let mut g = Graph::inference();
        let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
        let y = g.conv2d(xv, wv, stride, pad).map_err(|e| e.to_string())?;
        let expect = naive_conv(&x, &w, stride, pad);
        let worst = g.value(y).data().iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        conv_worst = conv_worst.max(worst);
    }
    check(conv_worst < 1e-5, || format!("conv2d differs from naive loops by {conv_worst:e}"))?;

    let mut circle_worst = 0.0f64;
    let mut r = rng(1);
    for _ in 0..100 {
        let b = r.gen_range(3..10);
        let d = r.gen_range(2..6);
        let gamma = [1.0, 32.0, 128.0][r.gen_range(0..3)];
        let m = r.gen_range(0.1..0.4);
        let f = Tensor::rand_uniform(&[b, d], -1.0, 1.0, &mut r);
        let labels = random_labels(b, 3, &mut r);
        let got = circle_value(&f, &labels, gamma, m);
        let want = circle_oracle(&rows(&f), &labels, gamma, m);
        circle_worst = circle_worst.max((got - want).abs() / want.abs().max(1.0));
    }
    check(circle_worst < 1e-6, || format!("circle loss differs from the formula by {circle_worst:e}"))?;
    Ok(format!(
        "AP exact on 1000 instances ({scored} scorable); conv2d max error {conv_worst:.1e}; circle max error {circle_worst:.1e}"
    ))
}

// 4 ------------------------------------------------------------------------

fn cost_invariants() -> Outcome {
    let narrow = BackboneConfig {
        width_divisor: 8,
        ..BackboneConfig::default()
    };
    let base = count_macs(&Model::<f32>::new(narrow.clone(), InsertionPlan::empty(), 0).unwrap()).total_macs;
    let shapes = enumerate_positions(&narrow);
    let mut pairs = 0;
    for kind in AttentionKind::ALL {
        let spec = AttentionSpec::new(kind).with_reduction(4);
        let added: Vec<u64> = (1..=17)
            .map(|p| count_macs(&Model::<f32>::new(narrow.clone(), InsertionPlan::single(p, spec), 0).unwrap()).total_macs - base)
            .collect();
        for p in 0..17 {
            for q in p + 1..17 {
                let (a, b) = (&shapes[p], &shapes[q]);
                if (a.channels, a.height, a.width) == (b.channels, b.height, b.width) {
                    check(added[p] == added[q], || format!("{kind}@{} vs @{}: {} ≠ {}", p + 1, q + 1, added[p], added[q]))?;
                    pairs += 1;
                }
            }
            check(added[p] == attention_block_macs(&spec, &shapes[p]), || format!("{kind}@{}: traced ≠ analytic", p + 1))?;
        }
    }

    let cfg = BackboneConfig::default();
    let mut min_early_ratio = f64::INFINITY;
    for shape in enumerate_positions(&cfg) {
        let nl = attention_block_macs(&AttentionSpec::new(AttentionKind::Nl), &shape);
        for kind in [AttentionKind::Se, AttentionKind::Hac, AttentionKind::Cnl] {
            let cw = attention_block_macs(&AttentionSpec::new(kind), &shape);
            check(cw < nl, || format!("{kind}@{} not cheaper than NL", shape.position))?;
            if shape.position <= 4 {
                min_early_ratio = min_early_ratio.min(nl as f64 / cw as f64);
            }
        }
    }
    check(min_early_ratio > 1e3, || format!("NL/channel-wise ratio at positions 1-4 only {min_early_ratio:.0}"))?;

    let b = count_macs(&Model::<f32>::new(cfg.clone(), InsertionPlan::empty(), 0).unwrap());
    let c = count_macs(&Model::<f32>::new(cfg, "cnl@6,8,14".parse().unwrap(), 0).unwrap());
    let share = (c.total_macs - b.total_macs) as f64 / b.total_macs as f64;
    check(share < 0.01, || format!("CNL@6,8,14 adds {:.3}% MACs", share * 100.0))?;
    Ok(format!(
        "{pairs} equal-shape pairs exact; min early NL/channel-wise ratio {min_early_ratio:.0}; CNL@6,8,14 adds {:.4}% MACs",
        share * 100.0
    ))
}

// 5 ------------------------------------------------------------------------

/// Reduced from the default bench protocol (batch 16, 50 warmup, 500 iters)
/// so five repetitions of three full-resolution models fit the time limit on
/// a single CPU core.
const LATENCY_BENCH: BenchConfig = BenchConfig {
    batch_size: 4,
    warmup: 1,
    iters: 5,
    seed: 0,
};

fn latency() -> Outcome {
    let t = Instant::now();
    let cfg = BackboneConfig::default();
    let models = [
        Model::<f32>::new(cfg.clone(), InsertionPlan::empty(), 0).unwrap(),
        Model::<f32>::new(cfg.clone(), "cnl@6,8,14".parse().unwrap(), 0).unwrap(),
        Model::<f32>::resnet101_reference(&cfg, 0).unwrap(),
    ];
    let mut ms = [Vec::new(), Vec::new(), Vec::new()];
    for run in 0..5 {
        for (i, m) in models.iter().enumerate() {
            let r = benchmark_latency(m, &BenchConfig { seed: run, ..LATENCY_BENCH }).map_err(|e| e.to_string())?;
            ms[i].push(r.ms_per_batch.unwrap());
        }
    }
    // median over runs, so that one run disturbed by the machine does not decide the outcome
    let median = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let (base, cnl, deep) = (median(&ms[0]), median(&ms[1]), median(&ms[2]));
    let spread = ms[0].iter().fold(0.0f64, |a, v| a.max((v - base).abs() / base));
    let cnl_over = cnl / base - 1.0;
    let deep_over = deep / base - 1.0;
    let runs = |v: &[f64]| v.iter().map(|x| format!("{x:.0}")).collect::<Vec<_>>().join("/");
    let summary = format!(
        "batch {}, median of 5 runs: baseline {base:.1} ms, CNL@6,8,14 {cnl:.1} ms ({:+.1}%), ResNet-101 {deep:.1} ms ({:+.1}%); baseline run spread {:.1}%; runs (ms) baseline {} CNL {} R101 {}",
        LATENCY_BENCH.batch_size,
        cnl_over * 100.0,
        deep_over * 100.0,
        spread * 100.0,
        runs(&ms[0]),
        runs(&ms[1]),
        runs(&ms[2])
    );
    check(cnl_over < 0.10, || format!("CNL overhead too large: {summary}"))?;
    check(deep_over > 0.25, || format!("ResNet-101 not slow enough: {summary}"))?;
    within(Duration::from_secs(600), t)?;
    Ok(summary)
}

// 6 ------------------------------------------------------------------------

fn desk_run(data: &Dataset, plan: &str, loss: LossKind, seed: u64) -> Result<f64, String> {
    let mut m = Model::<f32>::new(BackboneConfig::desk(data.num_train_ids()), plan.parse().unwrap(), seed).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        loss,
        seed,
        ..TrainConfig::desk()
    };
    train(&mut m, data, &cfg).map_err(|e| e.to_string())?;
    Ok(evaluate_model(&m, data, Metric::Cosine, 64).map_err(|e| e.to_string())?.map)
}

fn desk_experiment() -> Outcome {
    let t = Instant::now();
    let data = generate_synthetic(&SyntheticConfig::default()).map_err(|e| e.to_string())?;
    let arms = [
        ("none", LossKind::CeLs),
        ("cnl@6,8,14", LossKind::CeLs),
        ("cnl@6,8,14", LossKind::Circle),
    ];
    let mut maps = Vec::new();
    for (plan, loss) in arms {
        let runs: Vec<f64> = (0..3).map(|s| desk_run(&data, plan, loss, s)).collect::<Result<_, _>>()?;
        maps.push(runs);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (base, cnl, circle) = (mean(&maps[0]), mean(&maps[1]), mean(&maps[2]));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join("/");
    let summary = format!(
        "mean mAP baseline {base:.4} [{}], CNL@6,8,14 CE {cnl:.4} [{}], CNL@6,8,14 circle {circle:.4} [{}]",
        fmt(&maps[0]),
        fmt(&maps[1]),
        fmt(&maps[2])
    );
    check(cnl >= base, || format!("CNL below baseline: {summary}"))?;
    check(circle >= cnl, || format!("circle below cross-entropy: {summary}"))?;
    within(Duration::from_secs(45 * 60), t)?;
    Ok(summary)
}

// 7 ------------------------------------------------------------------------

const KINDS: [AttentionKind; 4] = AttentionKind::ALL;

fn nas_space() -> SearchSpace {
    SearchSpace {
        reduction: 8,
        ..SearchSpace::full(&KINDS, &BackboneConfig::desk(10))
    }
}

fn planted(seed: u64) -> (PlantedObjective, InsertionPlan) {
    let mut r = rng(seed);
    let kind = [AttentionKind::Se, AttentionKind::Hac, AttentionKind::Cnl][r.gen_range(0..3)];
    let mut positions: Vec<usize> = (1..=17).collect();
    positions.shuffle(&mut r);
    let chosen: BTreeSet<usize> = positions[..3].iter().copied().collect();
    let mut gains = BTreeMap::new();
    for &p in &chosen {
        gains.insert((kind, p), r.gen_range(0.02..0.04));
    }
    for _ in 0..6 {
        let k = KINDS[r.gen_range(0..4)];
        gains.entry((k, r.gen_range(1..=17))).or_insert(r.gen_range(0.0..0.01));
    }
    let plan = InsertionPlan::uniform(nas_space().spec(kind), &chosen.iter().copied().collect::<Vec<_>>());
    let obj = PlantedObjective {
        backbone: BackboneConfig::desk(10),
        base_map: 0.70,
        deep_map: 0.71,
        gains,
        synergy: vec![(chosen, 0.05)],
        speed: SpeedModel::default(),
    };
    (obj, plan)
}

fn hand_trial(plan: &str, anchor: Option<Anchor>, map: f64, speed: f64) -> TrialResult {
    let mut cost = CostReport::from_layers(plan, Vec::new());
    cost.batches_per_second = Some(speed);
    TrialResult::new(plan.parse().unwrap(), anchor, LossKind::CeLs, &[(0, map, map)], cost)
}

fn nas_recovery() -> Outcome {
    for seed in 0..20 {
        let (obj, want) = planted(seed);
        let mut search = Search::new(&obj, LossKind::CeLs, vec![0, 1, 2]);
        let res = run_pipeline(&nas_space(), &mut search, None).map_err(|e| e.to_string())?;
        let got = &res.combinations.first().ok_or("no combinations")?.plan;
        check(*got == want, || format!("planting {seed}: top-1 {got}, planted {want}"))?;
    }

    // hand sets: baseline mAP 0.80 at 30 batches/s, deep anchor 0.85 at 20
    let base = hand_trial("none", Some(Anchor::Baseline), 0.80, 30.0);
    let deep = hand_trial("none", Some(Anchor::Deep), 0.85, 20.0);
    let sets: [&[(&str, f64, f64, bool)]; 3] = [
        &[
            ("se@3", 0.82, 25.0, true),
            ("se@4", 0.79, 29.0, false),
            ("nl@1", 0.83, 10.0, false),
            ("nl@2", 0.86, 10.0, true),
        ],
        &[
            ("nl@3", 0.85, 10.0, true),
            ("hac@5", 0.80, 20.0, true),
            ("cnl@6", 0.90, 19.999, true),
            ("cnl@7", 0.7999, 100.0, false),
        ],
        &[("hac@1", 0.8001, 19.0, false), ("hac@2", 0.8501, 1.0, true), ("cnl@9", 0.5, 50.0, false)],
    ];
    let mut decided = 0;
    for set in sets {
        let trials: Vec<TrialResult> = set.iter().map(|c| hand_trial(c.0, None, c.1, c.2)).collect();
        let split = pareto_filter(&trials, &base, &deep).map_err(|e| e.to_string())?;
        let kept: BTreeSet<String> = split.kept.iter().map(|t| t.plan.to_string()).collect();
        let want: BTreeSet<String> = set.iter().filter(|c| c.3).map(|c| c.0.to_string()).collect();
        check(kept == want, || format!("kept {kept:?}, expected {want:?}"))?;
        decided += set.len();
    }
    Ok(format!("20/20 planted plans recovered as top-1; {decided} hand-set exclusion decisions exact"))
}

// 8 ------------------------------------------------------------------------

fn backbone_state(m: &Model<f32>) -> Vec<(String, Tensor<f32>)> {
    m.store
        .params
        .iter()
        .chain(&m.store.buffers)
        .filter(|(k, _)| !k.starts_with("classifier"))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

fn transfer() -> Outcome {
    let t = Instant::now();
    let source = generate_synthetic(&SyntheticConfig::default()).map_err(|e| e.to_string())?;
    let target = generate_synthetic(&SyntheticConfig {
        n_train_ids: 30,
        n_test_ids: 40,
        imgs_per_id: 12,
        seed: 1007,
        ..SyntheticConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let pretrain = TrainConfig::desk().scaled_epochs(0.5);
    let step1 = TrainConfig {
        epochs: 5,
        warmup_epochs: 0,
        lr_milestones: vec![],
        ..TrainConfig::desk()
    };
    let step2 = TrainConfig::desk().scaled_epochs(0.25);
    let err = |e: attnlab::training::TrainError| e.to_string();

    let mut rows = Vec::new();
    for seed in 0..3 {
        let mut m = Model::<f32>::new(BackboneConfig::desk(source.num_train_ids()), "cnl@6,8,14".parse().unwrap(), seed).unwrap();
        train(&mut m, &source, &TrainConfig { seed, ..pretrain.clone() }).map_err(err)?;
        let before = evaluate_model(&m, &target, Metric::Cosine, 64).map_err(|e| e.to_string())?.map;

        let (c1, c2) = (TrainConfig { seed, ..step1.clone() }, TrainConfig { seed, ..step2.clone() });
        let mut whole = m.clone();
        finetune_two_step(&mut whole, &target, &c1, &c2).map_err(err)?;

        // the same two steps taken one at a time, inspecting the model between them
        let frozen = backbone_state(&m);
        m.reset_classifier(target.num_train_ids(), c1.seed);
        let old_classifier = m.store.get(CLASSIFIER_WEIGHT).unwrap().clone();
        finetune_classifier(&mut m, &target, &c1).map_err(err)?;
        check(backbone_state(&m) == frozen, || format!("seed {seed}: step 1 changed backbone state"))?;
        check(*m.store.get(CLASSIFIER_WEIGHT).unwrap() != old_classifier, || format!("seed {seed}: step 1 did not train the classifier"))?;
        train(&mut m, &target, &c2).map_err(err)?;
        check(m == whole, || format!("seed {seed}: finetune_two_step differs from its two steps"))?;

        let after = evaluate_model(&whole, &target, Metric::Cosine, 64).map_err(|e| e.to_string())?.map;
        rows.push((before, after));
    }
    let summary = rows
        .iter()
        .map(|(b, a)| format!("{b:.4}→{a:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    for (seed, (b, a)) in rows.iter().enumerate() {
        check(a > b, || format!("seed {seed} did not improve: {summary}"))?;
    }
    within(Duration::from_secs(20 * 60), t)?;
    Ok(format!("backbone frozen in step 1; target mAP no-finetune→finetuned {summary}"))
}

// 9 ------------------------------------------------------------------------

fn dir_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(root).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            for (k, v) in dir_bytes(&p) {
                out.insert(format!("{}/{k}", p.file_name().unwrap().to_string_lossy()), v);
            }
        } else {
            out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap());
        }
    }
    out
}

fn log_csv(log: &TrainLog) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TrainLog::CSV_HEADER).unwrap();
    for r in log.csv_rows() {
        w.write_record(r).unwrap();
    }
    w.into_inner().unwrap()
}

/// Every artifact of one small end-to-end session, keyed by name.
fn artifacts(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let e = |e: &dyn std::fmt::Display| e.to_string();
    let mut out = BTreeMap::new();
    let synth = SyntheticConfig {
        n_train_ids: 6,
        n_test_ids: 6,
        imgs_per_id: 6,
        seed: 3,
        ..SyntheticConfig::default()
    };
    let data = generate_synthetic(&synth).map_err(|x| e(&x))?;
    data.write_folder(dir).map_err(|x| e(&x))?;
    for (k, v) in dir_bytes(dir) {
        out.insert(format!("synth/{k}"), v);
    }

    let mut m = Model::<f32>::new(BackboneConfig::desk(6), "cnl@6,8".parse().unwrap(), 1).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        warmup_epochs: 1,
        p_ids: 3,
        k_instances: 3,
        eval_every: 1,
        ..TrainConfig::desk()
    };
    let log = train(&mut m, &data, &cfg).map_err(|x| e(&x))?;
    out.insert("train/log.csv".into(), log_csv(&log));
    out.insert("train/log.json".into(), to_json(&log).into_bytes());
    let mut ckpt = Vec::new();
    write_checkpoint(&m, &mut ckpt).map_err(|x| e(&x))?;
    out.insert("train/model.ckpt".into(), ckpt);
    let res = evaluate_model(&m, &data, Metric::Cosine, 16).map_err(|x| e(&x))?;
    out.insert("eval/result.json".into(), to_json(&res).into_bytes());

    let cost = count_macs(&m);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CostReport::CSV_HEADER).unwrap();
    w.write_record(cost.csv_row()).unwrap();
    out.insert("bench/cost.csv".into(), w.into_inner().unwrap());
    out.insert("bench/cost.json".into(), to_json(&cost).into_bytes());

    let (obj, _) = planted(5);
    for threads in [1, 3] {
        let mut search = Search::new(&obj, LossKind::CeLs, vec![0, 1]);
        search.threads = threads;
        run_pipeline(&nas_space(), &mut search, Some(12)).map_err(|x| e(&x))?;
        let trials: Vec<TrialResult> = search.completed.values().cloned().collect();
        let mut csv = Vec::new();
        write_trials(&trials, &mut csv).map_err(|x| e(&x))?;
        let report = derive_rules_report(&trials, &BackboneConfig::desk(10));
        // thread count must not leak into any artifact
        out.insert("search/trials.csv".into(), csv);
        out.insert("search/rules.json".into(), to_json(&report).into_bytes());
        out.insert("plot/scatter.svg".into(), scatter_svg(&report.points, "mAP vs speed").into_bytes());
        out.insert(format!("search/threads{threads}.csv"), out["search/trials.csv"].clone());
    }
    Ok(out)
}

fn reproducibility() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = artifacts(a.path())?;
    let second = artifacts(b.path())?;
    let keys: Vec<&String> = first.keys().collect();
    check(keys == second.keys().collect::<Vec<_>>(), || "different artifact sets".into())?;
    for (k, v) in &first {
        check(second[k] == *v, || format!("{k} differs between runs"))?;
    }
    check(first["search/threads1.csv"] == first["search/threads3.csv"], || "trials.csv depends on thread count".into())?;
    let bytes: usize = first.values().map(Vec::len).sum();
    Ok(format!("{} artifacts ({bytes} bytes) identical across reruns and thread counts", first.len()))
}

// --------------------------------------------------------------------------

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome); 9] = [
        (1, "gradient suite", gradients),
        (2, "identity suite", identities),
        (3, "oracle suite", oracles),
        (4, "cost invariants", cost_invariants),
        (5, "measured latency", latency),
        (6, "desk experiment", desk_experiment),
        (7, "NAS recovery", nas_recovery),
        (8, "transfer", transfer),
        (9, "reproducibility", reproducibility),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {n} {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {n} {name} ({secs:.1}s): {why}");
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    // A failing criterion is reported above without stopping the rest of a
    // workspace test run; set ACCEPTANCE_STRICT=1 to turn it into a failing exit.
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
        std::process::exit(1);
    }
}
