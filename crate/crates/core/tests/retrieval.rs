//! Retrieval metrics against the brute-force definition, and data loading.

use attnlab::backbone::{BackboneConfig, InsertionPlan, Model};
use attnlab::data::{
    generate_synthetic, load_folder_dataset, DatasetManifest, Normalization, Split, SyntheticConfig, JUNK_ID,
    MANIFEST_FILE,
};
use attnlab::eval::{
    brute_force_ap_oracle, distance_matrix, evaluate, evaluate_model, relevance, EvalError, Metric, Relevance,
};
use attnlab::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{instance, Instance};

fn run(i: &Instance) -> Result<attnlab::eval::RetrievalResult, EvalError> {
    evaluate(&i.dist, &i.q_ids, &i.q_cams, &i.g_ids, &i.g_cams)
}

#[test]
fn evaluate_equals_brute_force_on_random_instances() {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let mut scored = 0;
    for _ in 0..1000 {
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
        match run(&inst) {
            Ok(res) => {
                scored += 1;
                let got: Vec<(usize, f64)> = res.per_query_ap.iter().map(|q| (q.query, q.ap)).collect();
                assert_eq!(got, oracle);
                let mean = oracle.iter().map(|o| o.1).sum::<f64>() / oracle.len() as f64;
                assert_eq!(res.map, mean);
            }
            Err(EvalError::NoValidQueries) => assert!(oracle.is_empty()),
            Err(e) => panic!("{e}"),
        }
    }
    assert!(scored > 500, "only {scored} instances had a valid query");
}

#[test]
fn strictly_increasing_transform_preserves_metrics() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let inst = instance(&mut r);
        let Ok(a) = run(&inst) else { continue };
        let moved = Instance {
            dist: inst.dist.map(|d| (3.0 * d).exp() + 2.0),
            ..inst
        };
        let b = run(&moved).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn cmc_is_a_monotone_curve_reaching_one() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let inst = instance(&mut r);
        let Ok(res) = run(&inst) else { continue };
        assert!(res.cmc.windows(2).all(|w| w[0] <= w[1]));
        assert!((res.cmc.last().unwrap() - 1.0).abs() < 1e-12);
        assert!(res.map > 0.0 && res.map <= 1.0);
        assert!(res.rank5() >= res.rank1());
    }
}

#[test]
fn junk_and_same_camera_matches_are_ignored() {
    // gallery: junk at distance 0, same-camera match at 0.1, true match at 0.2
    let dist = Tensor::new(&[1, 4], vec![0.0, 0.1, 0.2, 0.3]).unwrap();
    let r = evaluate(&dist, &[3], &[0], &[JUNK_ID, 3, 3, 5], &[1, 0, 2, 1]).unwrap();
    assert_eq!(r.map, 1.0);
    assert_eq!(r.rank1(), 1.0);
}

#[test]
fn distance_metrics_agree_on_ranking_for_unit_rows() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let unit = |r: &mut ChaCha8Rng, n: usize| {
        let t = Tensor::<f64>::rand_uniform(&[n, 6], -1.0, 1.0, r);
        attnlab::eval::l2_normalize_rows(&t)
    };
    let (q, g) = (unit(&mut r, 4), unit(&mut r, 9));
    let c = distance_matrix(&q, &g, Metric::Cosine).unwrap();
    let e = distance_matrix(&q, &g, Metric::Euclidean).unwrap();
    // for unit vectors ‖a−b‖² = 2·(1 − cos)
    for (dc, de) in c.data().iter().zip(e.data()) {
        assert!((de * de - 2.0 * dc).abs() < 1e-12);
    }
    assert!(distance_matrix(&q, &Tensor::zeros(&[3, 5]), Metric::Cosine).is_err());
}

fn small_cfg(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        n_train_ids: 5,
        n_test_ids: 6,
        imgs_per_id: 6,
        n_cams: 3,
        hw: (64, 32),
        seed,
    }
}

#[test]
fn evaluation_does_not_depend_on_batch_size() {
    let data = generate_synthetic(&small_cfg(4)).unwrap();
    let m = Model::<f32>::new(BackboneConfig::desk(5), "cnl@6".parse().unwrap(), 1).unwrap();
    let a = evaluate_model(&m, &data, Metric::Cosine, 1).unwrap();
    let b = evaluate_model(&m, &data, Metric::Cosine, 7).unwrap();
    let c = evaluate_model(&m, &data, Metric::Cosine, 64).unwrap();
    assert!((a.map - b.map).abs() < 1e-6 && (a.map - c.map).abs() < 1e-6);
    assert_eq!(a.rank1(), c.rank1());
    assert_eq!(a.config_id, "cnl@6");
}

#[test]
fn synthetic_split_counts() {
    let cfg = SyntheticConfig::default();
    let d = generate_synthetic(&cfg).unwrap();
    let c = d.manifest().counts();
    assert_eq!(c[&Split::Train], 50 * 20);
    assert_eq!(c[&Split::Query], 64 * 3);
    assert_eq!(c[&Split::Gallery], 64 * 17);
    assert_eq!(d.num_train_ids(), 50);
    let m = d.manifest();
    assert!(m.ids(Split::Train).is_disjoint(&m.ids(Split::Query)));
    assert_eq!(m.ids(Split::Query), m.ids(Split::Gallery));
    m.check_protocol().unwrap();
    // every query has a cross-camera match in the gallery
    for e in m.entries.iter().filter(|e| e.split == Split::Query) {
        assert!(m.entries.iter().any(|g| g.split == Split::Gallery && g.id == e.id && g.cam != e.cam));
    }
}

#[test]
fn synthetic_generation_is_deterministic() {
    let a = generate_synthetic(&small_cfg(9)).unwrap();
    let b = generate_synthetic(&small_cfg(9)).unwrap();
    let c = generate_synthetic(&small_cfg(10)).unwrap();
    assert_eq!(a.pixels, b.pixels);
    assert_eq!(a.entries, b.entries);
    assert_ne!(a.pixels, c.pixels);
}

#[test]
fn folder_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(&small_cfg(11)).unwrap();
    data.write_folder(dir.path()).unwrap();
    let back = load_folder_dataset(dir.path(), &dir.path().join(MANIFEST_FILE), data.hw, Normalization::default()).unwrap();
    assert_eq!(back.entries, data.entries);
    assert_eq!(back.pixels, data.pixels);
    assert_eq!(back.batch::<f32>(&[0, 3]), data.batch::<f32>(&[0, 3]));
}

#[test]
fn empty_manifest_loads_with_a_notice() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    std::fs::write(&path, "").unwrap();
    let d = load_folder_dataset(dir.path(), &path, (64, 32), Normalization::default()).unwrap();
    assert!(d.is_empty());
    assert_eq!(d.notices.len(), 1);
}

#[test]
fn malformed_manifest_reports_the_line() {
    let err = DatasetManifest::parse("a.png 1 0 train\nb.png x 0 query\n").unwrap_err();
    assert!(err.to_string().contains("line 2"), "{err}");
}

#[test]
fn missing_image_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    std::fs::write(&path, "nothere.png 1 0 train\n").unwrap();
    assert!(load_folder_dataset(dir.path(), &path, (64, 32), Normalization::default()).is_err());
}

/// Nearest neighbour on raw pixels must already beat a random ranking: the
/// identities are separable by appearance.
#[test]
fn raw_pixel_retrieval_beats_chance() {
    let data = generate_synthetic(&SyntheticConfig {
        n_train_ids: 2,
        n_test_ids: 20,
        imgs_per_id: 9,
        n_cams: 3,
        hw: (64, 32),
        seed: 12,
    })
    .unwrap();
    let (qi, gi) = (data.indices(Split::Query), data.indices(Split::Gallery));
    let feats = |idx: &[usize]| {
        let b: Tensor<f64> = data.batch(idx);
        let d = b.len() / idx.len();
        attnlab::eval::l2_normalize_rows(&b.reshape(&[idx.len(), d]).unwrap())
    };
    let labels = |idx: &[usize]| -> (Vec<i64>, Vec<usize>) { idx.iter().map(|&i| (data.entries[i].id, data.entries[i].cam)).unzip() };
    let (q_ids, q_cams) = labels(&qi);
    let (g_ids, g_cams) = labels(&gi);
    let dist = distance_matrix(&feats(&qi), &feats(&gi), Metric::Cosine).unwrap();
    let pixel = evaluate(&dist, &q_ids, &q_cams, &g_ids, &g_cams).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let random = Tensor::new(dist.shape(), (0..dist.len()).map(|_| r.gen::<f64>()).collect()).unwrap();
    let chance = evaluate(&random, &q_ids, &q_cams, &g_ids, &g_cams).unwrap();
    assert!(pixel.map > 2.0 * chance.map, "pixel {} vs chance {}", pixel.map, chance.map);
}

#[test]
fn disjoint_query_and_gallery_is_a_protocol_error() {
    let mut data = generate_synthetic(&small_cfg(13)).unwrap();
    for e in data.entries.iter_mut().filter(|e| e.split == Split::Gallery) {
        e.id += 1000;
    }
    let m = Model::<f32>::new(BackboneConfig::desk(5), InsertionPlan::empty(), 0).unwrap();
    assert!(matches!(
        evaluate_model(&m, &data, Metric::Cosine, 8),
        Err(EvalError::Protocol(_))
    ));
}
