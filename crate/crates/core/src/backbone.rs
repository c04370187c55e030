//! ResNet-50-style backbone with numbered attention insertion positions,
//! a BNNeck embedding head and a bias-free classifier.
//!
//! Position 1 is the stem output; position `p ≥ 2` is the output of the
//! `(p−1)`-th residual block, counted across all stages. With the default
//! stage depths (3, 4, 6, 3) that gives 17 positions.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocks::{
    attention_forward, bottleneck_forward, init_attention, init_bottleneck, AttentionKind,
    AttentionSpec, BottleneckSpec, DEFAULT_REDUCTION,
};
use crate::nn::{ParamStore, Session};
use crate::tensor::{Element, Tensor, TensorError, Var};

/// mAP of the attention-free ResNet-101 on Market-1501 (three runs).
pub const RESNET101_REFERENCE_MAP: (f64, f64) = (0.8707, 0.0006);
pub const RESNET101_DEPTHS: [usize; 4] = [3, 4, 23, 3];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("insertion position {position} outside 1..={max}")]
    InvalidPosition { position: usize, max: usize },
    #[error("invalid backbone config: {0}")]
    InvalidConfig(String),
    #[error("plan parse error: {0}")]
    PlanParse(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub stage_depths: [usize; 4],
    pub base_width: usize,
    pub width_divisor: usize,
    pub last_stride: usize,
    pub input_hw: (usize, usize),
    pub num_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_depths: [3, 4, 6, 3],
            base_width: 64,
            width_divisor: 1,
            last_stride: 1,
            input_hw: (256, 128),
            num_classes: 751,
        }
    }
}

impl BackboneConfig {
    /// Narrow, low-resolution network with all 17 positions intact.
    pub fn desk(num_classes: usize) -> Self {
        Self {
            width_divisor: 8,
            input_hw: (64, 32),
            num_classes,
            ..Self::default()
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.stage_depths.iter().sum()
    }

    pub fn num_positions(&self) -> usize {
        1 + self.num_blocks()
    }

    pub fn stem_width(&self) -> usize {
        self.base_width / self.width_divisor
    }

    pub fn feature_dim(&self) -> usize {
        self.stem_width() * 8 * BottleneckSpec::EXPANSION
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.width_divisor == 0 || self.base_width % self.width_divisor != 0 {
            return bad(format!(
                "base_width {} not divisible by width_divisor {}",
                self.base_width, self.width_divisor
            ));
        }
        if self.stem_width() == 0 {
            return bad("zero stem width".into());
        }
        if self.stage_depths.contains(&0) {
            return bad("every stage needs at least one block".into());
        }
        if !(1..=2).contains(&self.last_stride) {
            return bad(format!("last_stride must be 1 or 2, got {}", self.last_stride));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.input_hw.0 < 32 || self.input_hw.1 < 16 {
            return bad(format!("input {:?} too small", self.input_hw));
        }
        Ok(())
    }

    fn stage_stride(&self, stage: usize) -> usize {
        match stage {
            0 => 1,
            3 => self.last_stride,
            _ => 2,
        }
    }

    /// Residual block layouts in network order with their parameter prefixes.
    pub fn block_layout(&self) -> Vec<(String, BottleneckSpec)> {
        let mut out = Vec::with_capacity(self.num_blocks());
        let mut cin = self.stem_width();
        for (stage, &depth) in self.stage_depths.iter().enumerate() {
            let planes = self.stem_width() << stage;
            for j in 0..depth {
                let spec = BottleneckSpec {
                    in_channels: cin,
                    planes,
                    stride: if j == 0 { self.stage_stride(stage) } else { 1 },
                    downsample: j == 0,
                    se: None,
                };
                cin = spec.out_channels();
                out.push((format!("layer{}.{j}", stage + 1), spec));
            }
        }
        out
    }

    /// Positions that end a stage (the stem counts as ending stage 0).
    pub fn stage_end_positions(&self) -> Vec<usize> {
        let mut acc = 1;
        self.stage_depths
            .iter()
            .map(|d| {
                acc += d;
                acc
            })
            .collect()
    }

    /// Stage (1-based) a position belongs to; 0 for the stem.
    pub fn stage_of(&self, position: usize) -> usize {
        let mut acc = 1;
        if position <= 1 {
            return 0;
        }
        for (s, d) in self.stage_depths.iter().enumerate() {
            acc += d;
            if position <= acc {
                return s + 1;
            }
        }
        self.stage_depths.len()
    }
}

/// Tensor shape entering an attention block at a position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PositionShape {
    pub position: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

fn out_dim(x: usize, k: usize, stride: usize, pad: usize) -> usize {
    (x + 2 * pad - k) / stride + 1
}

/// All insertion positions of a config, in order.
pub fn enumerate_positions(cfg: &BackboneConfig) -> Vec<PositionShape> {
    let (mut h, mut w) = cfg.input_hw;
    // stem conv 7×7/2 then max-pool 3×3/2
    h = out_dim(out_dim(h, 7, 2, 3), 3, 2, 1);
    w = out_dim(out_dim(w, 7, 2, 3), 3, 2, 1);
    let mut out = vec![PositionShape {
        position: 1,
        channels: cfg.stem_width(),
        height: h,
        width: w,
    }];
    for (i, (_, b)) in cfg.block_layout().iter().enumerate() {
        h = out_dim(h, 3, b.stride, 1);
        w = out_dim(w, 3, b.stride, 1);
        out.push(PositionShape {
            position: i + 2,
            channels: b.out_channels(),
            height: h,
            width: w,
        });
    }
    out
}

/// Attention blocks keyed by insertion position.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InsertionPlan {
    pub entries: BTreeMap<usize, AttentionSpec>,
}

impl InsertionPlan {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn single(position: usize, spec: AttentionSpec) -> Self {
        Self::uniform(spec, &[position])
    }

    /// The same block at each listed position.
    pub fn uniform(spec: AttentionSpec, positions: &[usize]) -> Self {
        Self {
            entries: positions.iter().map(|&p| (p, spec)).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn positions(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn kinds(&self) -> Vec<AttentionKind> {
        let mut k: Vec<_> = self.entries.values().map(|s| s.kind).collect();
        k.sort();
        k.dedup();
        k
    }

    pub fn validate(&self, cfg: &BackboneConfig) -> Result<()> {
        let max = cfg.num_positions();
        let shapes = enumerate_positions(cfg);
        for (&p, spec) in &self.entries {
            if p == 0 || p > max {
                return Err(ModelError::InvalidPosition { position: p, max });
            }
            spec.inner_channels(shapes[p - 1].channels)?;
        }
        Ok(())
    }
}

/// `none`, or `+`-joined groups `kind[:r]@p1,p2,…`, e.g. `cnl@6,8,14` or
/// `cnl@8+nl@14`.
impl fmt::Display for InsertionPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.entries.is_empty() {
            return f.write_str("none");
        }
        let mut groups: BTreeMap<(AttentionKind, usize), Vec<usize>> = BTreeMap::new();
        for (&p, s) in &self.entries {
            groups.entry((s.kind, s.reduction)).or_default().push(p);
        }
        let parts: Vec<String> = groups
            .into_iter()
            .map(|((kind, r), ps)| {
                let ps: Vec<String> = ps.iter().map(|p| p.to_string()).collect();
                if r == DEFAULT_REDUCTION || kind == AttentionKind::Nl {
                    format!("{kind}@{}", ps.join(","))
                } else {
                    format!("{kind}:{r}@{}", ps.join(","))
                }
            })
            .collect();
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for InsertionPlan {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let err = |m: String| ModelError::PlanParse(m);
        if s.is_empty() || s.eq_ignore_ascii_case("none") {
            return Ok(Self::empty());
        }
        let mut plan = Self::empty();
        for group in s.split('+') {
            let (head, positions) = group
                .split_once('@')
                .ok_or_else(|| err(format!("{group:?} lacks '@'")))?;
            let (kind, r) = match head.split_once(':') {
                Some((k, r)) => (
                    k,
                    r.parse::<usize>()
                        .map_err(|_| err(format!("bad reduction {r:?}")))?,
                ),
                None => (head, DEFAULT_REDUCTION),
            };
            let kind: AttentionKind = kind.trim().parse().map_err(|e| err(format!("{e}")))?;
            let spec = AttentionSpec::new(kind).with_reduction(r);
            for p in positions.split(',') {
                let p: usize = p
                    .trim()
                    .parse()
                    .map_err(|_| err(format!("bad position {p:?}")))?;
                if plan.entries.insert(p, spec).is_some() {
                    return Err(err(format!("position {p} given twice")));
                }
            }
        }
        Ok(plan)
    }
}

/// Outputs of the feature extractor.
#[derive(Clone, Copy, Debug)]
pub struct Features {
    /// Globally pooled features before the BNNeck, `[B×D]`.
    pub pooled: Var,
    /// BNNeck output used for retrieval and classification, `[B×D]`.
    pub embedding: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: BackboneConfig,
    pub plan: InsertionPlan,
    pub store: ParamStore<T>,
}

pub const CLASSIFIER_WEIGHT: &str = "classifier.weight";

/// Std of the normal classifier initialization.
pub const CLASSIFIER_INIT_STD: f64 = 0.001;

fn attention_prefix(position: usize) -> String {
    format!("attn.p{position}")
}

impl<T: Element> Model<T> {
    /// Build and initialize a model. Backbone and attention weights come from
    /// separate seeded streams, so the backbone is identical for every plan.
    pub fn new(config: BackboneConfig, plan: InsertionPlan, seed: u64) -> Result<Self> {
        config.validate()?;
        plan.validate(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stem = config.stem_width();
        store.init_conv("stem.conv.weight", stem, 3, 7, &mut rng);
        store.init_bn("stem.bn", stem);
        let mut model = Self {
            config,
            plan,
            store,
        };
        let layout = model.layout();
        for (prefix, spec) in &layout {
            let plain = BottleneckSpec { se: None, ..*spec };
            init_bottleneck(&mut model.store, prefix, &plain, &mut rng)?;
        }
        let d = model.config.feature_dim();
        model.store.init_bn("neck.bn", d);
        model.store.insert(
            CLASSIFIER_WEIGHT,
            Tensor::rand_normal(&[d, model.config.num_classes], CLASSIFIER_INIT_STD, &mut rng),
        );

        let shapes = enumerate_positions(&model.config);
        let mut attn_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a77e_0000_0000);
        for (&p, spec) in &model.plan.entries {
            let prefix = match (spec.kind, p) {
                (AttentionKind::Se, p) if p >= 2 => format!("{}.se", layout[p - 2].0),
                _ => attention_prefix(p),
            };
            init_attention(&mut model.store, &prefix, spec, shapes[p - 1].channels, &mut attn_rng)?;
        }
        Ok(model)
    }

    /// The attention-free ResNet-101 reference with otherwise equal config.
    pub fn resnet101_reference(config: &BackboneConfig, seed: u64) -> Result<Self> {
        let cfg = BackboneConfig {
            stage_depths: RESNET101_DEPTHS,
            ..config.clone()
        };
        Self::new(cfg, InsertionPlan::empty(), seed)
    }

    /// Residual blocks with any SE gates folded in.
    pub fn layout(&self) -> Vec<(String, BottleneckSpec)> {
        let mut layout = self.config.block_layout();
        for (&p, spec) in &self.plan.entries {
            if spec.kind == AttentionKind::Se && p >= 2 {
                layout[p - 2].1.se = Some(*spec);
            }
        }
        layout
    }

    /// Parameter prefix of the block at a plan position.
    pub fn attention_prefix(&self, position: usize) -> Option<String> {
        let spec = self.plan.entries.get(&position)?;
        Some(match spec.kind {
            AttentionKind::Se if position >= 2 => format!("{}.se", self.layout()[position - 2].0),
            _ => attention_prefix(position),
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    fn between_block_attention(&self, s: &mut Session<'_, T>, position: usize, x: Var) -> Result<Var> {
        match self.plan.entries.get(&position) {
            Some(spec) if spec.kind != AttentionKind::Se || position == 1 => {
                Ok(attention_forward(s, &attention_prefix(position), spec, x)?)
            }
            _ => Ok(x),
        }
    }

    fn check_position(&self, s: &Session<'_, T>, x: Var, expect: &PositionShape) -> Result<()> {
        let shape = s.graph.shape(x);
        if shape[1..] != [expect.channels, expect.height, expect.width] {
            return Err(ModelError::Tensor(TensorError::Dimension {
                op: "backbone",
                detail: format!(
                    "position {} has shape {:?}, enumerated {:?}",
                    expect.position,
                    &shape[1..],
                    expect
                ),
            }));
        }
        Ok(())
    }

    /// Run the backbone and BNNeck on a `[B×3×H×W]` input.
    pub fn forward(&self, s: &mut Session<'_, T>, input: Var) -> Result<Features> {
        let (h, w) = self.config.input_hw;
        let shape = s.graph.shape(input);
        if shape.len() != 4 || shape[1..] != [3, h, w] {
            return Err(ModelError::Tensor(TensorError::Dimension {
                op: "forward_features",
                detail: format!("expected B×3×{h}×{w}, got {shape:?}"),
            }));
        }
        let positions = enumerate_positions(&self.config);
        let x = s.conv("stem.conv.weight", input, 2, 3)?;
        let x = s.bn("stem.bn", x)?;
        let x = s.graph.relu(x)?;
        let mut x = s.graph.max_pool2d(x, 3, 2, 1)?;
        self.check_position(s, x, &positions[0])?;
        x = self.between_block_attention(s, 1, x)?;
        for (i, (prefix, spec)) in self.layout().iter().enumerate() {
            x = bottleneck_forward(s, prefix, spec, x)?;
            self.check_position(s, x, &positions[i + 1])?;
            x = self.between_block_attention(s, i + 2, x)?;
        }
        let b = s.graph.shape(x)[0];
        let d = self.feature_dim();
        let pooled = s.graph.global_avg_pool(x)?;
        let pooled = s.graph.reshape(pooled, &[b, d])?;
        let embedding = s.bn("neck.bn", pooled)?;
        Ok(Features { pooled, embedding })
    }

    /// Bias-free classifier on the BNNeck embedding.
    pub fn logits(&self, s: &mut Session<'_, T>, embedding: Var) -> Result<Var> {
        let w = s.p(CLASSIFIER_WEIGHT)?;
        Ok(s.graph.matmul(embedding, w)?)
    }

    /// Eval-mode BNNeck embeddings of a batch.
    pub fn forward_features(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut s = Session::eval(&self.store);
        let x = s.graph.input(batch.clone());
        let f = self.forward(&mut s, x)?;
        Ok(s.graph.value(f.embedding).clone())
    }

    /// Eval-mode class logits of a batch.
    pub fn forward_logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut s = Session::eval(&self.store);
        let x = s.graph.input(batch.clone());
        let f = self.forward(&mut s, x)?;
        let l = self.logits(&mut s, f.embedding)?;
        Ok(s.graph.value(l).clone())
    }

    /// Replace the classifier with a freshly initialized one for a new label set.
    pub fn reset_classifier(&mut self, num_classes: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.config.num_classes = num_classes;
        self.store.insert(
            CLASSIFIER_WEIGHT,
            Tensor::rand_normal(&[self.feature_dim(), num_classes], CLASSIFIER_INIT_STD, &mut rng),
        );
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            plan: self.plan.clone(),
            store: self.store.cast(),
        }
    }
}
