//! Backbone identity contracts, checkpoints and MAC accounting.

use attnlab::backbone::{enumerate_positions, BackboneConfig, InsertionPlan, Model};
use attnlab::blocks::{force_identity, AttentionKind, AttentionSpec};
use attnlab::checkpoint;
use attnlab::cost::{attention_block_macs, count_macs};
use attnlab::nn::Session;
use attnlab::tensor::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn batch(cfg: &BackboneConfig, n: usize, seed: u64) -> Tensor<f32> {
    let (h, w) = cfg.input_hw;
    Tensor::rand_uniform(&[n, 3, h, w], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn zero_initialized_nonlocal_is_bit_identical_to_baseline() {
    let cfg = BackboneConfig::desk(10);
    let x = batch(&cfg, 2, 1);
    let base = Model::<f32>::new(cfg.clone(), InsertionPlan::empty(), 3).unwrap();
    for plan in ["nl@1", "nl@5,9", "nl@17", "nl@2,3,4,14"] {
        let m = Model::<f32>::new(cfg.clone(), plan.parse().unwrap(), 3).unwrap();
        assert_eq!(
            bits(&m.forward_features(&x).unwrap()),
            bits(&base.forward_features(&x).unwrap()),
            "{plan}"
        );
    }
}

#[test]
fn unit_gates_leave_features_unchanged() {
    let cfg = BackboneConfig::desk(10);
    let x = batch(&cfg, 2, 2);
    let base = Model::<f32>::new(cfg.clone(), InsertionPlan::empty(), 4).unwrap();
    let want = bits(&base.forward_features(&x).unwrap());
    for plan in ["se:4@1", "se@3,7,12", "hac@2,6", "hac@17", "cnl@6,8,14", "cnl:4@1+cnl@16", "se@4+cnl@6+hac@10"] {
        let mut m = Model::<f32>::new(cfg.clone(), plan.parse().unwrap(), 4).unwrap();
        for (p, spec) in m.plan.entries.clone() {
            let prefix = m.attention_prefix(p).unwrap();
            force_identity(&mut m.store, &prefix, spec.kind);
        }
        assert_eq!(bits(&m.forward_features(&x).unwrap()), want, "{plan}");
    }
}

#[test]
fn attention_weights_do_not_perturb_backbone_init() {
    let cfg = BackboneConfig::desk(10);
    let base = Model::<f32>::new(cfg.clone(), InsertionPlan::empty(), 11).unwrap();
    let m = Model::<f32>::new(cfg, "cnl@6,8,14+se@3".parse().unwrap(), 11).unwrap();
    for (name, t) in &base.store.params {
        assert_eq!(m.store.get(name), Some(t), "{name}");
    }
    assert!(m.store.params.len() > base.store.params.len());
}

#[test]
fn feature_dimensions() {
    assert_eq!(BackboneConfig::default().feature_dim(), 2048);
    let cfg = BackboneConfig::desk(7);
    assert_eq!(cfg.feature_dim(), 256);
    let m = Model::<f32>::new(cfg.clone(), InsertionPlan::empty(), 0).unwrap();
    let x = batch(&cfg, 3, 0);
    assert_eq!(m.forward_features(&x).unwrap().shape(), &[3, 256]);
    assert_eq!(m.forward_logits(&x).unwrap().shape(), &[3, 7]);
}

#[test]
fn wrong_input_size_is_rejected() {
    let cfg = BackboneConfig::desk(7);
    let m = Model::<f32>::new(cfg, InsertionPlan::empty(), 0).unwrap();
    let x = Tensor::<f32>::zeros(&[1, 3, 32, 32]);
    assert!(m.forward_features(&x).is_err());
}

#[test]
fn invalid_plans_are_rejected() {
    let cfg = BackboneConfig::desk(7);
    for bad in ["cnl@0", "cnl@18", "se:3@5", "gc@4", "cnl@"] {
        let parsed = bad.parse::<InsertionPlan>();
        let ok = parsed.map(|p| p.validate(&cfg).is_ok()).unwrap_or(false);
        assert!(!ok, "{bad} accepted");
    }
}

#[test]
fn plan_strings_round_trip() {
    for s in ["none", "cnl@6,8,14", "hac@2+nl@9", "se:4@3"] {
        let p: InsertionPlan = s.parse().unwrap();
        assert_eq!(p.to_string().parse::<InsertionPlan>().unwrap(), p);
    }
}

#[test]
fn checkpoint_round_trip_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let cfg = BackboneConfig::desk(6);
    let m = Model::<f64>::new(cfg.clone(), "nl@2+cnl@6,8".parse().unwrap(), 5).unwrap();
    checkpoint::save(&m, &path).unwrap();
    let back: Model<f64> = checkpoint::load(&path).unwrap();
    assert_eq!(back, m);
    let x = batch(&cfg, 2, 9).cast::<f64>();
    assert_eq!(back.forward_features(&x).unwrap(), m.forward_features(&x).unwrap());
    assert!(checkpoint::load::<f32>(&path).is_err());
}

#[test]
fn mac_cost_depends_only_on_tensor_shape() {
    // full resolution, narrow width: the shape bookkeeping is the same and
    // building 68 models stays cheap
    let cfg = BackboneConfig {
        width_divisor: 8,
        ..BackboneConfig::default()
    };
    let base = count_macs(&Model::<f32>::new(cfg.clone(), InsertionPlan::empty(), 0).unwrap()).total_macs;
    let shapes = enumerate_positions(&cfg);
    for kind in AttentionKind::ALL {
        let spec = AttentionSpec::new(kind).with_reduction(4);
        let added: Vec<(usize, u64)> = (1..=17)
            .map(|p| {
                let m = Model::<f32>::new(cfg.clone(), InsertionPlan::single(p, spec), 0).unwrap();
                (p, count_macs(&m).total_macs - base)
            })
            .collect();
        for &(p, a) in &added {
            for &(q, b) in &added {
                let (sp, sq) = (&shapes[p - 1], &shapes[q - 1]);
                if (sp.channels, sp.height, sp.width) == (sq.channels, sq.height, sq.width) {
                    assert_eq!(a, b, "{kind} at {p} vs {q}");
                }
            }
            assert_eq!(a, attention_block_macs(&spec, &shapes[p - 1]), "{kind}@{p}");
        }
    }
}

#[test]
fn channel_wise_blocks_are_far_cheaper_than_nonlocal() {
    let shapes = enumerate_positions(&BackboneConfig::default());
    let nl = AttentionSpec::new(AttentionKind::Nl);
    for shape in &shapes {
        let nl_macs = attention_block_macs(&nl, shape);
        for kind in [AttentionKind::Se, AttentionKind::Hac, AttentionKind::Cnl] {
            let cw = attention_block_macs(&AttentionSpec::new(kind), shape);
            assert!(cw < nl_macs, "{kind}@{}", shape.position);
            if shape.position <= 4 {
                let ratio = nl_macs as f64 / cw as f64;
                assert!(ratio > 1e3, "{kind}@{}: ratio {ratio}", shape.position);
            }
        }
    }
}

#[test]
fn cnl_at_stage_positions_adds_under_one_percent() {
    let cfg = BackboneConfig::default();
    let base = count_macs(&Model::<f32>::new(cfg.clone(), InsertionPlan::empty(), 0).unwrap());
    let cnl = count_macs(&Model::<f32>::new(cfg, "cnl@6,8,14".parse().unwrap(), 0).unwrap());
    let added = cnl.total_macs - base.total_macs;
    assert_eq!(added, cnl.macs_with_prefix("attn."));
    assert!((added as f64) < 0.01 * base.total_macs as f64, "{added} vs {}", base.total_macs);
}

/// Convolution MACs of a ResNet built by hand from the stage widths.
fn hand_conv_macs(depths: [usize; 4], width: usize, (h, w): (usize, usize), last_stride: usize) -> u64 {
    let out = |n: usize, k: usize, s: usize, p: usize| (n + 2 * p - k) / s + 1;
    let (mut h, mut w) = (out(h, 7, 2, 3), out(w, 7, 2, 3));
    let mut total = (width * 3 * 49 * h * w) as u64;
    h = out(h, 3, 2, 1);
    w = out(w, 3, 2, 1);
    let mut cin = width;
    for (stage, &depth) in depths.iter().enumerate() {
        let planes = width << stage;
        let stride = match stage {
            0 => 1,
            3 => last_stride,
            _ => 2,
        };
        for block in 0..depth {
            let s = if block == 0 { stride } else { 1 };
            let (ho, wo) = (out(h, 3, s, 1), out(w, 3, s, 1));
            total += (cin * planes * h * w) as u64;
            total += (planes * planes * 9 * ho * wo) as u64;
            total += (planes * planes * 4 * ho * wo) as u64;
            if block == 0 {
                total += (cin * planes * 4 * ho * wo) as u64;
            }
            cin = planes * 4;
            h = ho;
            w = wo;
        }
    }
    total
}

#[test]
fn backbone_macs_match_hand_count() {
    for (depths, ratio) in [([3, 4, 6, 3], None), ([3, 4, 23, 3], Some(()))] {
        let cfg = BackboneConfig {
            stage_depths: depths,
            ..BackboneConfig::default()
        };
        let m = Model::<f32>::new(cfg.clone(), InsertionPlan::empty(), 0).unwrap();
        let r = count_macs(&m);
        let classifier = (cfg.feature_dim() * cfg.num_classes) as u64;
        assert_eq!(r.total_macs - classifier, hand_conv_macs(depths, 64, cfg.input_hw, 1));
        if ratio.is_some() {
            assert!(r.config_id.ends_with("/r101"));
        }
    }
}

/// With last stride 1 the fourth stage runs at 4× the usual resolution, which
/// dilutes the share of the 17 extra third-stage blocks.
#[test]
fn resnet101_costs_markedly_more_than_resnet50() {
    let cfg = BackboneConfig::default();
    let r50 = count_macs(&Model::<f32>::new(cfg.clone(), InsertionPlan::empty(), 0).unwrap()).total_macs;
    let r101 = count_macs(&Model::<f32>::resnet101_reference(&cfg, 0).unwrap()).total_macs;
    let ratio = r101 as f64 / r50 as f64;
    assert!((1.5..1.7).contains(&ratio), "ratio {ratio}");
}

#[test]
fn analytic_count_equals_traced_count() {
    let cfg = BackboneConfig::desk(9);
    for plan in ["none", "cnl@6,8,14", "nl@3+se@5+hac:8@1", "se:4@1+se@17", "nl@17"] {
        let m = Model::<f32>::new(cfg.clone(), plan.parse().unwrap(), 0).unwrap();
        let mut s = Session::with_graph(&m.store, Graph::inference(), attnlab::nn::Mode::Eval);
        let x = s.graph.input(batch(&cfg, 1, 0));
        let f = m.forward(&mut s, x).unwrap();
        m.logits(&mut s, f.embedding).unwrap();
        let report = count_macs(&m);
        assert_eq!(report.total_macs, s.graph.macs(), "{plan}");
        assert!(report.is_consistent());
        assert_eq!(report.total_params as usize, m.num_params(), "{plan}");
    }
}
