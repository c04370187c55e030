//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use attnlab::blocks::{init_attention, AttentionSpec};
use attnlab::nn::{Mode, ParamStore, Session};
use attnlab::tensor::{Graph, Tensor, Var};
use attnlab::data::JUNK_ID;
use attnlab::training::circle_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn store_for(spec: &AttentionSpec, c: usize, seed: u64) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    init_attention(&mut store, "a", spec, c, &mut rng(seed)).unwrap();
    // replace every parameter (including zero-initialized projections) with
    // O(1) random values so each weight influences the output
    let mut r = rng(seed + 1000);
    for t in store.params.values_mut() {
        *t = Tensor::rand_uniform(t.shape(), -0.5, 0.5, &mut r);
    }
    store
}

pub type BlockFn<'r> = &'r dyn Fn(&mut Session<'_, f64>, Var) -> Var;

pub fn weighted_loss<'s>(
    store: &'s ParamStore<f64>,
    x: &Tensor<f64>,
    mode: Mode,
    run: BlockFn<'_>,
    weights: &Tensor<f64>,
    grads: bool,
) -> (Session<'s, f64>, Var, Var) {
    let graph = if grads { Graph::new() } else { Graph::inference() };
    let mut s = Session::with_graph(store, graph, mode);
    let xv = s.graph.param(x.clone());
    let y = run(&mut s, xv);
    let wv = s.graph.input(weights.clone());
    let p = s.graph.mul(y, wv).unwrap();
    let l = s.graph.sum(p).unwrap();
    (s, xv, l)
}

/// Central-difference check of a block's scalar loss with respect to its
/// input and every parameter. Returns the worst per-tensor relative error
/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
pub fn block_grad_error(store: &ParamStore<f64>, x: &Tensor<f64>, mode: Mode, run: BlockFn<'_>) -> f64 {
    let weights = Tensor::rand_uniform(&out_shape(store, x, mode, run), -1.0, 1.0, &mut rng(99));
    let value = |store: &ParamStore<f64>, x: &Tensor<f64>| {
        let (s, _, l) = weighted_loss(store, x, mode, run, &weights, false);
        s.graph.value(l).item()
    };
    let (mut s, xv, l) = weighted_loss(store, x, mode, run, &weights, true);
    s.graph.backward(l).unwrap();
    let eps = 1e-6;
    let rel = |a: &[f64], n: &[f64]| {
        let diff = a.iter().zip(n).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(n.iter().map(|v| v * v).sum::<f64>().sqrt());
        // some gradients vanish identically (a key bias under softmax shift
        // invariance); compare those in absolute terms
        if scale < 1e-6 {
            diff
        } else {
            diff / scale
        }
    };
    let analytic = s.graph.grad(xv).unwrap();
    let numeric: Vec<f64> = (0..x.len())
        .map(|i| {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += eps;
            xm.data_mut()[i] -= eps;
            (value(store, &xp) - value(store, &xm)) / (2.0 * eps)
        })
        .collect();
    let mut worst = rel(analytic.data(), &numeric);
    for (name, &v) in s.bound_params().clone().iter() {
        let analytic = s.graph.grad(v).unwrap();
        let numeric: Vec<f64> = (0..store.get(name).unwrap().len())
            .map(|i| {
                let (mut sp, mut sm) = (store.clone(), store.clone());
                sp.get_mut(name).unwrap().data_mut()[i] += eps;
                sm.get_mut(name).unwrap().data_mut()[i] -= eps;
                (value(&sp, x) - value(&sm, x)) / (2.0 * eps)
            })
            .collect();
        let e = rel(analytic.data(), &numeric);
        assert!(e.is_finite(), "{name}");
        worst = worst.max(e);
    }
    worst
}

pub fn out_shape(
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    mode: Mode,
    run: BlockFn<'_>,
) -> Vec<usize> {
    let mut s = Session::with_graph(store, Graph::inference(), mode);
    let xv = s.graph.input(x.clone());
    let y = run(&mut s, xv);
    s.graph.shape(y).to_vec()
}


/// Direct 6-loop convolution (per batch element, output channel, output
/// pixel, input channel, kernel row, kernel column).
pub fn naive_conv(x: &Tensor<f32>, w: &Tensor<f32>, stride: usize, pad: usize) -> Vec<f32> {
    let [b, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, k, _] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0f32; b * o * ho * wo];
    for n in 0..b {
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0f64;
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let r = (i * stride + ki) as isize - pad as isize;
                                let s = (j * stride + kj) as isize - pad as isize;
                                if r < 0 || s < 0 || r >= h as isize || s >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((n * c + ic) * h + r as usize) * wd + s as usize];
                                let wv = w.data()[((oc * c + ic) * k + ki) * k + kj];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((n * o + oc) * ho + i) * wo + j] = acc as f32;
                }
            }
        }
    }
    out
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Circle loss of one anchor written straight from the formula.
pub fn circle_anchor(sp: &[f64], sn: &[f64], gamma: f64, m: f64) -> f64 {
    let lp: Vec<f64> = sp.iter().map(|&s| -gamma * (1.0 + m - s).max(0.0) * (s - (1.0 - m))).collect();
    let ln: Vec<f64> = sn.iter().map(|&s| gamma * (s + m).max(0.0) * (s - m)).collect();
    softplus(logsumexp(&lp) + logsumexp(&ln))
}

/// Batch circle loss by explicit pair enumeration on raw feature rows.
pub fn circle_oracle(f: &[Vec<f64>], labels: &[usize], gamma: f64, m: f64) -> f64 {
    let norm = |v: &Vec<f64>| -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    };
    let z: Vec<Vec<f64>> = f.iter().map(norm).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..z.len() {
        let (mut sp, mut sn) = (Vec::new(), Vec::new());
        for j in 0..z.len() {
            if i == j {
                continue;
            }
            if labels[i] == labels[j] {
                sp.push(dot(&z[i], &z[j]));
            } else {
                sn.push(dot(&z[i], &z[j]));
            }
        }
        if !sp.is_empty() && !sn.is_empty() {
            total += circle_anchor(&sp, &sn, gamma, m);
            count += 1;
        }
    }
    total / count as f64
}

pub fn circle_value(f: &Tensor<f64>, labels: &[usize], gamma: f64, m: f64) -> f64 {
    let mut g = Graph::inference();
    let x = g.input(f.clone());
    let z = g.l2_normalize_rows(x).unwrap();
    let l = circle_loss(&mut g, z, labels, gamma, m).unwrap();
    g.value(l).item()
}

pub fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect()
}

pub fn random_labels(b: usize, classes: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    // at least one repeated label so that some anchor has a positive
    let mut l: Vec<usize> = (0..b).map(|_| r.gen_range(0..classes)).collect();
    l[1] = l[0];
    if l.iter().all(|&x| x == l[0]) {
        l[b - 1] = (l[0] + 1) % classes;
    }
    l
}

pub struct Instance {
    pub dist: Tensor<f64>,
    pub q_ids: Vec<i64>,
    pub q_cams: Vec<usize>,
    pub g_ids: Vec<i64>,
    pub g_cams: Vec<usize>,
}

/// Random instance with coarse distances (many ties), junk gallery images and
/// same-camera matches.
pub fn instance(r: &mut ChaCha8Rng) -> Instance {
    let (nq, ng) = (r.gen_range(1..8), r.gen_range(1..25));
    let ids = r.gen_range(1..5);
    let id = |r: &mut ChaCha8Rng| if r.gen_bool(0.1) { JUNK_ID } else { r.gen_range(0..ids) };
    let q_ids = (0..nq).map(|_| r.gen_range(0..ids)).collect();
    let g_ids = (0..ng).map(|_| id(r)).collect();
    let q_cams = (0..nq).map(|_| r.gen_range(0..3)).collect();
    let g_cams = (0..ng).map(|_| r.gen_range(0..3)).collect();
    let dist = (0..nq * ng).map(|_| r.gen_range(0..10) as f64 / 10.0).collect();
    Instance {
        dist: Tensor::new(&[nq, ng], dist).unwrap(),
        q_ids,
        q_cams,
        g_ids,
        g_cams,
    }
}

