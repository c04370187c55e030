//! Analytic MAC / parameter accounting, a wall-clock latency harness, and
//! the accuracy-vs-speed exclusion rule used to prune the search space.
//!
//! One MAC is one multiply plus one add. Convolutions, linear maps and the
//! attention matrix products are MACs; batch norm, activations, pooling and
//! gating are reported separately as elementwise operations.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{enumerate_positions, Model, PositionShape};
use crate::blocks::{AttentionKind, AttentionSpec, BottleneckSpec};
use crate::nas::TrialResult;
use crate::tensor::{Element, Tensor};

/// Per-batch latency on the Jetson AGX Xavier (16-bit, batch 16), in ms.
pub mod xavier_reference {
    pub const BASELINE_MS: f64 = 36.917;
    pub const CNL_6_8_14_MS: f64 = 38.623;
    pub const RESNET101_MS: f64 = 53.454;
}

pub const DEFAULT_BENCH_BATCH: usize = 16;
pub const DEFAULT_WARMUP: usize = 50;
pub const DEFAULT_ITERS: usize = 500;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub macs: u64,
    pub params: u64,
    pub elementwise: u64,
}

impl LayerCost {
    fn new(name: impl Into<String>, macs: usize, params: usize, elementwise: usize) -> Self {
        Self {
            name: name.into(),
            macs: macs as u64,
            params: params as u64,
            elementwise: elementwise as u64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub config_id: String,
    /// MACs for one image.
    pub total_macs: u64,
    pub total_params: u64,
    pub total_elementwise: u64,
    pub per_layer: Vec<LayerCost>,
    pub batch_size: Option<usize>,
    pub batches_per_second: Option<f64>,
    pub ms_per_batch: Option<f64>,
    pub ms_std: Option<f64>,
    pub iters: Option<usize>,
    pub threads: Option<usize>,
    pub machine: Option<String>,
}

impl CostReport {
    pub fn from_layers(config_id: impl Into<String>, per_layer: Vec<LayerCost>) -> Self {
        Self {
            config_id: config_id.into(),
            total_macs: per_layer.iter().map(|l| l.macs).sum(),
            total_params: per_layer.iter().map(|l| l.params).sum(),
            total_elementwise: per_layer.iter().map(|l| l.elementwise).sum(),
            per_layer,
            batch_size: None,
            batches_per_second: None,
            ms_per_batch: None,
            ms_std: None,
            iters: None,
            threads: None,
            machine: None,
        }
    }

    /// MACs of all layers under a name prefix.
    pub fn macs_with_prefix(&self, prefix: &str) -> u64 {
        self.per_layer
            .iter()
            .filter(|l| l.name.starts_with(prefix))
            .map(|l| l.macs)
            .sum()
    }

    /// Totals agree with the per-layer list, and measured rates are
    /// consistent with each other.
    pub fn is_consistent(&self) -> bool {
        let sums = self.total_macs == self.per_layer.iter().map(|l| l.macs).sum::<u64>()
            && self.total_params == self.per_layer.iter().map(|l| l.params).sum::<u64>()
            && self.total_elementwise == self.per_layer.iter().map(|l| l.elementwise).sum::<u64>();
        let rates = match (self.batches_per_second, self.ms_per_batch) {
            (Some(bps), Some(ms)) => (bps - 1000.0 / ms).abs() <= 1e-9 * bps.abs().max(1.0),
            _ => true,
        };
        sums && rates
    }

    /// Record measured per-batch latencies (milliseconds).
    pub fn set_timing(&mut self, batch_size: usize, samples_ms: &[f64], threads: usize) {
        let n = samples_ms.len() as f64;
        let mean = samples_ms.iter().sum::<f64>() / n;
        let var = if samples_ms.len() > 1 {
            samples_ms.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        self.batch_size = Some(batch_size);
        self.ms_per_batch = Some(mean);
        self.batches_per_second = Some(1000.0 / mean);
        self.ms_std = Some(var.sqrt());
        self.iters = Some(samples_ms.len());
        self.threads = Some(threads);
        self.machine = Some(machine_descriptor());
    }

    pub const CSV_HEADER: [&'static str; 6] =
        ["config_id", "macs", "params", "batches_per_sec", "ms_per_batch", "machine"];

    pub fn csv_row(&self) -> [String; 6] {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        [
            self.config_id.clone(),
            self.total_macs.to_string(),
            self.total_params.to_string(),
            opt(self.batches_per_second),
            opt(self.ms_per_batch),
            self.machine.clone().unwrap_or_default(),
        ]
    }
}

/// Operating system, architecture and logical CPU count of this host.
pub fn machine_descriptor() -> String {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown-cpu".into());
    format!(
        "{}-{} {} x{}",
        std::env::consts::OS,
        std::env::consts::ARCH,
        model,
        cpus
    )
}

fn conv_cost(name: String, cin: usize, cout: usize, k: usize, ho: usize, wo: usize) -> LayerCost {
    LayerCost::new(name, cout * cin * k * k * ho * wo, cout * cin * k * k, 0)
}

fn bn_cost(name: String, c: usize, spatial: usize) -> LayerCost {
    // normalize, scale, shift; relu accounted by the caller
    LayerCost::new(name, 0, 2 * c, c * spatial)
}

/// Per-layer cost of one attention block on a `C×H×W` input.
pub fn attention_costs(prefix: &str, spec: &AttentionSpec, shape: &PositionShape) -> Vec<LayerCost> {
    let (c, hw) = (shape.channels, shape.height * shape.width);
    let d = spec
        .inner_channels(c)
        .expect("attention spec validated against its site");
    let p = |s: &str| format!("{prefix}.{s}");
    match spec.kind {
        AttentionKind::Se | AttentionKind::Hac => vec![
            LayerCost::new(p("pool"), 0, 0, c * hw),
            LayerCost::new(p("fc1"), c * d, c * d + d, d),
            LayerCost::new(p("fc2"), d * c, d * c + c, c),
            LayerCost::new(p("gate"), 0, 0, c * hw),
        ],
        AttentionKind::Cnl => vec![
            LayerCost::new(p("pool"), 0, 0, c * hw),
            LayerCost::new(p("query"), c * d, c * d + d, 0),
            LayerCost::new(p("key"), c * d, c * d + d, 0),
            LayerCost::new(p("value"), c * d, c * d + d, 0),
            LayerCost::new(p("similarity"), d * d, 0, d * d),
            LayerCost::new(p("aggregate"), d * d, 0, 0),
            LayerCost::new(p("out"), d * c, d * c + c, c),
            LayerCost::new(p("gate"), 0, 0, c * hw),
        ],
        AttentionKind::Nl => vec![
            LayerCost::new(p("theta"), c * d * hw, c * d + d, d * hw),
            LayerCost::new(p("phi"), c * d * hw, c * d + d, d * hw),
            LayerCost::new(p("g"), c * d * hw, c * d + d, d * hw),
            LayerCost::new(p("similarity"), hw * hw * d, 0, hw * hw),
            LayerCost::new(p("aggregate"), hw * hw * d, 0, 0),
            LayerCost::new(p("z"), d * c * hw, d * c + c, c * hw),
            LayerCost::new(p("residual"), 0, 0, c * hw),
        ],
    }
}

fn bottleneck_costs(prefix: &str, b: &BottleneckSpec, inp: (usize, usize), out: &PositionShape) -> Vec<LayerCost> {
    let (ho, wo) = (out.height, out.width);
    let s = ho * wo;
    let p = |n: &str| format!("{prefix}.{n}");
    let mut v = vec![
        conv_cost(p("conv1"), b.in_channels, b.planes, 1, inp.0, inp.1),
        bn_cost(p("bn1"), b.planes, inp.0 * inp.1),
        LayerCost::new(p("relu1"), 0, 0, b.planes * inp.0 * inp.1),
        conv_cost(p("conv2"), b.planes, b.planes, 3, ho, wo),
        bn_cost(p("bn2"), b.planes, s),
        LayerCost::new(p("relu2"), 0, 0, b.planes * s),
        conv_cost(p("conv3"), b.planes, b.out_channels(), 1, ho, wo),
        bn_cost(p("bn3"), b.out_channels(), s),
    ];
    if let Some(se) = &b.se {
        v.extend(attention_costs(&p("se"), se, out));
    }
    if b.downsample {
        v.push(conv_cost(p("downsample.conv"), b.in_channels, b.out_channels(), 1, ho, wo));
        v.push(bn_cost(p("downsample.bn"), b.out_channels(), s));
    }
    v.push(LayerCost::new(p("add_relu"), 0, 0, 2 * b.out_channels() * s));
    v
}

/// Analytic per-image cost of a model at its configured input size.
pub fn count_macs<T: Element>(model: &Model<T>) -> CostReport {
    let cfg = &model.config;
    let positions = enumerate_positions(cfg);
    let stem = cfg.stem_width();
    let (h, w) = cfg.input_hw;
    let (h1, w1) = ((h + 6 - 7) / 2 + 1, (w + 6 - 7) / 2 + 1);
    let mut layers = vec![
        conv_cost("stem.conv".into(), 3, stem, 7, h1, w1),
        bn_cost("stem.bn".into(), stem, h1 * w1),
        LayerCost::new("stem.relu", 0, 0, stem * h1 * w1),
        LayerCost::new("stem.maxpool", 0, 0, 9 * stem * positions[0].height * positions[0].width),
    ];
    let attn_at = |p: usize, layers: &mut Vec<LayerCost>| {
        if let Some(spec) = model.plan.entries.get(&p) {
            if spec.kind != AttentionKind::Se || p == 1 {
                layers.extend(attention_costs(&format!("attn.p{p}"), spec, &positions[p - 1]));
            }
        }
    };
    attn_at(1, &mut layers);
    for (i, (prefix, b)) in model.layout().iter().enumerate() {
        let inp = (positions[i].height, positions[i].width);
        layers.extend(bottleneck_costs(prefix, b, inp, &positions[i + 1]));
        attn_at(i + 2, &mut layers);
    }
    let last = positions.last().expect("positions");
    let d = cfg.feature_dim();
    layers.push(LayerCost::new("head.gap", 0, 0, d * last.height * last.width));
    layers.push(bn_cost("head.neck_bn".into(), d, 1));
    layers.push(LayerCost::new("head.classifier", d * cfg.num_classes, d * cfg.num_classes, 0));
    let id = format!("{}{}", model.plan, depth_tag(cfg.stage_depths));
    CostReport::from_layers(id, layers)
}

fn depth_tag(depths: [usize; 4]) -> String {
    if depths == crate::backbone::RESNET101_DEPTHS {
        "/r101".into()
    } else if depths == [3, 4, 6, 3] {
        String::new()
    } else {
        format!("/d{}-{}-{}-{}", depths[0], depths[1], depths[2], depths[3])
    }
}

/// Cost of one attention block at a site, summed.
pub fn attention_block_macs(spec: &AttentionSpec, shape: &PositionShape) -> u64 {
    attention_costs("x", spec, shape).iter().map(|l| l.macs).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub batch_size: usize,
    pub warmup: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BENCH_BATCH,
            warmup: DEFAULT_WARMUP,
            iters: DEFAULT_ITERS,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("iters must be at least 1")]
    NoIterations,
    #[error(transparent)]
    Model(#[from] crate::backbone::ModelError),
}

/// Measure eval-mode forward latency on random input of the configured size.
/// Single-threaded; the analytic cost is included in the report.
pub fn benchmark_latency<T: Element>(model: &Model<T>, cfg: &BenchConfig) -> Result<CostReport, BenchError> {
    if cfg.iters == 0 {
        return Err(BenchError::NoIterations);
    }
    let (h, w) = model.config.input_hw;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = Tensor::<T>::rand_uniform(&[cfg.batch_size, 3, h, w], -1.0, 1.0, &mut rng);
    for _ in 0..cfg.warmup {
        std::hint::black_box(model.forward_features(&batch)?);
    }
    let mut samples = Vec::with_capacity(cfg.iters);
    for _ in 0..cfg.iters {
        let t = Instant::now();
        std::hint::black_box(model.forward_features(&batch)?);
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mut report = count_macs(model);
    report.set_timing(cfg.batch_size, &samples, 1);
    Ok(report)
}

#[derive(Debug, Error, PartialEq)]
pub enum ParetoError {
    #[error("trial {0} lacks mAP or speed")]
    MissingMetric(String),
}

/// Outcome of the accuracy-vs-speed exclusion rule.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParetoSplit {
    pub kept: Vec<TrialResult>,
    pub rejected: Vec<TrialResult>,
}

/// Reject a trial iff it is slower than the deep reference without matching
/// its mAP, or its mAP is below the fast (baseline) reference.
pub fn pareto_filter(
    trials: &[TrialResult],
    ref_fast: &TrialResult,
    ref_deep: &TrialResult,
) -> Result<ParetoSplit, ParetoError> {
    let metrics = |t: &TrialResult| -> Result<(f64, f64), ParetoError> {
        match t.speed() {
            Some(s) if t.map_mean.is_finite() => Ok((t.map_mean, s)),
            _ => Err(ParetoError::MissingMetric(t.key())),
        }
    };
    let (fast_map, _) = metrics(ref_fast)?;
    let (deep_map, deep_speed) = metrics(ref_deep)?;
    let mut split = ParetoSplit::default();
    for t in trials {
        let (map, speed) = metrics(t)?;
        let reject = (speed < deep_speed && map < deep_map) || map < fast_map;
        if reject {
            split.rejected.push(t.clone());
        } else {
            split.kept.push(t.clone());
        }
    }
    Ok(split)
}
