//! Re-identification training: losses, augmentation, identity-balanced
//! sampling, momentum SGD with warmup and step decay, and two-step
//! fine-tuning for transfer to a new label set.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{Model, ModelError, CLASSIFIER_WEIGHT};
use crate::data::{Dataset, Split};
use crate::eval::{evaluate_model, EvalError, Metric};
use crate::nn::{Mode, Session, BN_MOMENTUM};
use crate::tensor::{Element, Graph, Result as TResult, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("classifier has {classifier} outputs but the dataset has {dataset} training identities")]
    ClassifierMismatch { classifier: usize, dataset: usize },
    #[error("dataset has no training images")]
    EmptyDataset,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Tensor(TensorError),
    #[error(transparent)]
    Model(ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { op } => TrainError::NonFinite(op.to_string()),
            e => TrainError::Tensor(e),
        }
    }
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(t) => t.into(),
            e => TrainError::Model(e),
        }
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Label-smoothed cross-entropy: target `1−ε` on the true class and
/// `ε/(N−1)` elsewhere, averaged over the batch.
pub fn cross_entropy_ls<T: Element>(g: &mut Graph<T>, logits: Var, labels: &[usize], eps: f64) -> TResult<Var> {
    let shape = g.shape(logits).to_vec();
    let [b, n] = match shape[..] {
        [b, n] => [b, n],
        _ => return Err(TensorError::Dimension {
            op: "cross_entropy_ls",
            detail: format!("logits shape {shape:?}"),
        }),
    };
    let invalid = |detail: String| TensorError::Invalid {
        op: "cross_entropy_ls",
        detail,
    };
    if labels.len() != b {
        return Err(invalid(format!("{} labels for batch of {b}", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n) {
        return Err(invalid(format!("label {l} out of range for {n} classes")));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(invalid(format!("smoothing {eps} outside [0,1)")));
    }
    if eps > 0.0 && n < 2 {
        return Err(invalid("smoothing needs at least two classes".into()));
    }
    let off = if n > 1 { eps / (n - 1) as f64 } else { 0.0 };
    let mut target = vec![T::of(off); b * n];
    for (i, &l) in labels.iter().enumerate() {
        target[i * n + l] = T::of(1.0 - eps);
    }
    let target = g.input(Tensor::new(&[b, n], target)?);
    let logp = g.log_softmax(logits)?;
    let prod = g.mul(logp, target)?;
    let s = g.sum(prod)?;
    g.scale(s, -1.0 / b as f64)
}

/// Pairwise circle loss on L2-normalized `[B×D]` features, averaged over the
/// anchors that have at least one positive and one negative in the batch.
/// The pair weights α are differentiated through, not treated as constants.
pub fn circle_loss<T: Element>(g: &mut Graph<T>, features: Var, labels: &[usize], gamma: f64, m: f64) -> TResult<Var> {
    let shape = g.shape(features).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(TensorError::Dimension {
            op: "circle_loss",
            detail: format!("features {shape:?} with {} labels", labels.len()),
        });
    }
    let b = shape[0];
    let ft = g.transpose_last2(features)?;
    let sim = g.matmul(features, ft)?;

    let mut pos = vec![false; b * b];
    let mut neg = vec![false; b * b];
    let mut anchors = vec![T::ZERO; b];
    let mut count = 0usize;
    for i in 0..b {
        for j in 0..b {
            if i != j {
                pos[i * b + j] = labels[i] == labels[j];
                neg[i * b + j] = labels[i] != labels[j];
            }
        }
        let row = i * b..(i + 1) * b;
        if pos[row.clone()].iter().any(|&x| x) && neg[row].iter().any(|&x| x) {
            anchors[i] = T::ONE;
            count += 1;
        }
    }
    if count == 0 {
        return Err(TensorError::Invalid {
            op: "circle_loss",
            detail: "batch has no anchor with both a positive and a negative pair".into(),
        });
    }
    // positive logits: −γ·relu(1+m−s)·(s−(1−m))
    let neg_s = g.scale(sim, -1.0)?;
    let ap_in = g.add_scalar(neg_s, 1.0 + m)?;
    let alpha_p = g.relu(ap_in)?;
    let dp = g.add_scalar(sim, -(1.0 - m))?;
    let lp = g.mul(alpha_p, dp)?;
    let lp = g.scale(lp, -gamma)?;
    // negative logits: γ·relu(s+m)·(s−m)
    let an_in = g.add_scalar(sim, m)?;
    let alpha_n = g.relu(an_in)?;
    let dn = g.add_scalar(sim, -m)?;
    let ln = g.mul(alpha_n, dn)?;
    let ln = g.scale(ln, gamma)?;

    let lse_p = g.masked_logsumexp_rows(lp, &pos)?;
    let lse_n = g.masked_logsumexp_rows(ln, &neg)?;
    let z = g.add(lse_p, lse_n)?;
    let per_anchor = g.softplus(z)?;
    let w = g.input(Tensor::new(&[b], anchors)?);
    let kept = g.mul(per_anchor, w)?;
    let total = g.sum(kept)?;
    g.scale(total, 1.0 / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip: bool,
    /// Zero padding (in normalized units, i.e. the channel mean) before the crop.
    pub pad: usize,
    /// Crop at a random offset; otherwise at the centre.
    pub random_crop: bool,
    pub erasing_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: true,
            pad: 10,
            random_crop: true,
            erasing_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            flip: false,
            pad: 10,
            random_crop: false,
            erasing_prob: 0.0,
        }
    }
}

/// What [`augment_recorded`] did to an image.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AugmentRecord {
    pub flipped: bool,
    /// Top-left corner of the crop in padded coordinates.
    pub crop: (usize, usize),
    /// Erased rectangle `(top, left, height, width)`.
    pub erased: Option<(usize, usize, usize, usize)>,
}

/// Flip, pad-and-crop and random erasing of a normalized CHW image.
pub fn augment<R: Rng>(img: &[f32], hw: (usize, usize), cfg: &AugmentConfig, rng: &mut R) -> Vec<f32> {
    augment_recorded(img, hw, cfg, rng).0
}

pub fn augment_recorded<R: Rng>(
    img: &[f32],
    (h, w): (usize, usize),
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (Vec<f32>, AugmentRecord) {
    let plane = h * w;
    let channels = img.len() / plane.max(1);
    let mut rec = AugmentRecord {
        flipped: cfg.flip && rng.gen_bool(0.5),
        ..Default::default()
    };
    let p = cfg.pad;
    rec.crop = if cfg.random_crop {
        (rng.gen_range(0..=2 * p), rng.gen_range(0..=2 * p))
    } else {
        (p, p)
    };
    let mut out = vec![0.0f32; img.len()];
    for c in 0..channels {
        for r in 0..h {
            // row/col in the unpadded image, if inside it
            let sr = (r + rec.crop.0).checked_sub(p).filter(|&v| v < h);
            for col in 0..w {
                let sc = (col + rec.crop.1).checked_sub(p).filter(|&v| v < w);
                if let (Some(sr), Some(sc)) = (sr, sc) {
                    let sc = if rec.flipped { w - 1 - sc } else { sc };
                    out[c * plane + r * w + col] = img[c * plane + sr * w + sc];
                }
            }
        }
    }
    if cfg.erasing_prob > 0.0 && rng.gen_bool(cfg.erasing_prob.min(1.0)) {
        let area = plane as f64;
        for _ in 0..100 {
            let target = rng.gen_range(0.02..0.4) * area;
            let aspect: f64 = rng.gen_range(0.3..(1.0 / 0.3));
            let eh = (target * aspect).sqrt().round() as usize;
            let ew = (target / aspect).sqrt().round() as usize;
            if eh > 0 && ew > 0 && eh < h && ew < w {
                let top = rng.gen_range(0..=h - eh);
                let left = rng.gen_range(0..=w - ew);
                for c in 0..channels {
                    for r in top..top + eh {
                        out[c * plane + r * w + left..c * plane + r * w + left + ew].fill(0.0);
                    }
                }
                rec.erased = Some((top, left, eh, ew));
                break;
            }
        }
    }
    (out, rec)
}

/// Identity-balanced sampler: every batch holds `p` identities with `k`
/// images each. One epoch consumes each identity's images in chunks of `k`
/// (resampling identities with fewer than `k` images), drawing `p`
/// identities at random until fewer than `p` have chunks left.
pub fn pk_batches<R: Rng>(by_id: &BTreeMap<usize, Vec<usize>>, p: usize, k: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut chunks: BTreeMap<usize, Vec<Vec<usize>>> = BTreeMap::new();
    for (&label, imgs) in by_id {
        let mut imgs = imgs.clone();
        if imgs.is_empty() {
            continue;
        }
        if imgs.len() < k {
            imgs = (0..k).map(|_| imgs[rng.gen_range(0..imgs.len())]).collect();
        }
        imgs.shuffle(rng);
        let full: Vec<Vec<usize>> = imgs.chunks_exact(k).map(<[usize]>::to_vec).collect();
        chunks.insert(label, full);
    }
    let mut batches = Vec::new();
    loop {
        let mut avail: Vec<usize> = chunks.iter().filter(|(_, c)| !c.is_empty()).map(|(&l, _)| l).collect();
        if avail.len() < p {
            break;
        }
        avail.shuffle(rng);
        let mut batch = Vec::with_capacity(p * k);
        for l in &avail[..p] {
            let c = chunks.get_mut(l).expect("label").pop().expect("chunk");
            batch.extend(c);
        }
        batches.push(batch);
    }
    batches
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Label-smoothed cross-entropy on the classifier logits.
    CeLs,
    /// Cross-entropy plus circle loss on the pooled features.
    Circle,
    /// Circle loss alone.
    CircleOnly,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::CeLs => "ce_ls",
            LossKind::Circle => "circle",
            LossKind::CircleOnly => "circle_only",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ce_ls" | "ce" => Ok(LossKind::CeLs),
            "circle" => Ok(LossKind::Circle),
            "circle_only" => Ok(LossKind::CircleOnly),
            other => Err(format!("unknown loss {other:?} (ce_ls|circle|circle_only)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub label_smoothing: f64,
    pub circle_gamma: f64,
    pub circle_m: f64,
    /// Multiplier of the circle term when it supplements cross-entropy.
    pub circle_weight: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub p_ids: usize,
    pub k_instances: usize,
    pub flip: bool,
    pub pad: usize,
    pub erasing_prob: f64,
    /// Evaluate on the query/gallery split every this many epochs (0: never).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::CeLs,
            label_smoothing: 0.1,
            circle_gamma: 128.0,
            circle_m: 0.25,
            circle_weight: 1.0,
            epochs: 120,
            warmup_epochs: 10,
            base_lr: 0.035,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_milestones: vec![40, 70],
            lr_decay: 0.1,
            p_ids: 16,
            k_instances: 4,
            flip: true,
            pad: 10,
            erasing_prob: 0.5,
            eval_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Schedule for the synthetic desk-scale set (64×32 inputs). The crop
    /// padding is scaled with the image width, and the circle term is
    /// weighted by 1/γ so its gradient is on the scale of cross-entropy.
    pub fn desk() -> Self {
        let d = Self::default();
        Self {
            epochs: 40,
            warmup_epochs: 4,
            base_lr: 0.05,
            lr_milestones: vec![27],
            p_ids: 8,
            k_instances: 4,
            pad: 3,
            circle_weight: 1.0 / d.circle_gamma,
            ..d
        }
    }

    /// The same schedule with every epoch count scaled by `f`.
    pub fn scaled_epochs(&self, f: f64) -> Self {
        let s = |e: usize| ((e as f64 * f).round() as usize).max(1);
        Self {
            epochs: s(self.epochs),
            warmup_epochs: if self.warmup_epochs == 0 { 0 } else { s(self.warmup_epochs) },
            lr_milestones: self.lr_milestones.iter().map(|&m| s(m)).collect(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} outside [0,1)", self.label_smoothing));
        }
        if !(self.circle_m > 0.0 && self.circle_m < 1.0) {
            return bad(format!("circle_m {} outside (0,1)", self.circle_m));
        }
        if self.circle_gamma <= 0.0 || !self.circle_gamma.is_finite() {
            return bad(format!("circle_gamma {} must be positive", self.circle_gamma));
        }
        if self.circle_weight < 0.0 || !self.circle_weight.is_finite() {
            return bad(format!("circle_weight {} must be non-negative", self.circle_weight));
        }
        if self.base_lr < 0.0 || !self.base_lr.is_finite() {
            return bad(format!("base_lr {} must be non-negative", self.base_lr));
        }
        if self.p_ids < 2 || self.k_instances < 2 {
            return bad("p_ids and k_instances must both be at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.erasing_prob) {
            return bad(format!("erasing_prob {} outside [0,1]", self.erasing_prob));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0,1)", self.momentum));
        }
        Ok(())
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            flip: self.flip,
            pad: self.pad,
            random_crop: self.pad > 0,
            erasing_prob: self.erasing_prob,
        }
    }

    /// Learning rate for an epoch: linear warmup from a tenth of the base
    /// rate, then step decay at each milestone.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let warm = if epoch < self.warmup_epochs {
            0.1 + 0.9 * epoch as f64 / self.warmup_epochs as f64
        } else {
            1.0
        };
        let decays = self.lr_milestones.iter().filter(|&&m| epoch >= m).count() as i32;
        self.base_lr * warm * self.lr_decay.powi(decays)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub rank1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub eval: Option<EvalSnapshot>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config_id: String,
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub const CSV_HEADER: [&'static str; 3] = ["epoch", "loss", "lr"];

    pub fn csv_rows(&self) -> Vec<[String; 3]> {
        self.epochs
            .iter()
            .map(|e| [e.epoch.to_string(), format!("{:.8}", e.loss), format!("{:.8}", e.lr)])
            .collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

/// Which parameters move and whether batch norm tracks statistics.
struct Scope {
    trainable: fn(&str) -> bool,
    bn_mode: Mode,
}

const FULL: Scope = Scope {
    trainable: |_| true,
    bn_mode: Mode::Train,
};

const CLASSIFIER_ONLY: Scope = Scope {
    trainable: |name| name == CLASSIFIER_WEIGHT,
    bn_mode: Mode::Eval,
};

/// Momentum SGD with L2 weight decay folded into the gradient.
#[derive(Clone, Debug, Default)]
pub struct Sgd<T> {
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn step(
        &mut self,
        store: &mut crate::nn::ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) {
        let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
        for (name, g) in grads {
            let Some(p) = store.get_mut(name) else { continue };
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![T::ZERO; g.len()]);
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = mu * *vi + gi + wd * *w;
                *w = *w - lr * *vi;
            }
        }
    }
}

fn labelled_train_indices(data: &Dataset) -> (BTreeMap<usize, Vec<usize>>, Vec<usize>) {
    let map = data.train_label_map();
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut labels = vec![usize::MAX; data.len()];
    for i in data.indices(Split::Train) {
        if let Some(&l) = map.get(&data.entries[i].id) {
            by_label.entry(l).or_default().push(i);
            labels[i] = l;
        }
    }
    (by_label, labels)
}

/// Forward one batch and build the configured loss.
fn batch_loss<T: Element>(
    model: &Model<T>,
    s: &mut Session<'_, T>,
    x: Tensor<T>,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<Var> {
    let input = s.graph.input(x);
    let f = model.forward(s, input)?;
    let ce = |s: &mut Session<'_, T>| -> Result<Var> {
        let logits = model.logits(s, f.embedding)?;
        Ok(cross_entropy_ls(&mut s.graph, logits, labels, cfg.label_smoothing)?)
    };
    let circle = |s: &mut Session<'_, T>| -> Result<Var> {
        let z = s.graph.l2_normalize_rows(f.pooled)?;
        Ok(circle_loss(&mut s.graph, z, labels, cfg.circle_gamma, cfg.circle_m)?)
    };
    Ok(match cfg.loss {
        LossKind::CeLs => ce(s)?,
        LossKind::CircleOnly => circle(s)?,
        LossKind::Circle => {
            let a = ce(s)?;
            let b = circle(s)?;
            let b = s.graph.scale(b, cfg.circle_weight)?;
            s.graph.add(a, b)?
        }
    })
}

fn check_classifier<T: Element>(model: &Model<T>, data: &Dataset) -> Result<()> {
    let n = data.num_train_ids();
    if n == 0 {
        return Err(TrainError::EmptyDataset);
    }
    if model.config.num_classes != n {
        return Err(TrainError::ClassifierMismatch {
            classifier: model.config.num_classes,
            dataset: n,
        });
    }
    Ok(())
}

fn train_scoped<T: Element>(model: &mut Model<T>, data: &Dataset, cfg: &TrainConfig, scope: &Scope) -> Result<TrainLog> {
    cfg.validate()?;
    check_classifier(model, data)?;
    let (by_label, labels) = labelled_train_indices(data);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let aug = cfg.augment();
    let (h, w) = data.hw;
    let mut opt = Sgd::default();
    let mut log = TrainLog {
        config_id: format!("{}/{}", model.plan, cfg.loss.name()),
        seed: cfg.seed,
        epochs: Vec::new(),
    };
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let batches = pk_batches(&by_label, cfg.p_ids, cfg.k_instances, &mut rng);
        if batches.is_empty() {
            return Err(TrainError::Config(format!(
                "fewer than p_ids={} identities with images",
                cfg.p_ids
            )));
        }
        let mut loss_sum = 0.0;
        for batch in &batches {
            let mut x = Vec::with_capacity(batch.len() * 3 * h * w);
            for &i in batch {
                x.extend(augment(&data.image(i), data.hw, &aug, &mut rng).into_iter().map(|v| T::of(v as f64)));
            }
            let x = Tensor::new(&[batch.len(), 3, h, w], x)?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();

            let (grads, bn_updates, loss) = {
                let mut s = Session::with_graph(&model.store, Graph::new(), scope.bn_mode);
                s.set_trainable(scope.trainable);
                let loss = batch_loss(model, &mut s, x, &y, cfg)?;
                s.graph.backward(loss)?;
                let grads: BTreeMap<String, Tensor<T>> = s
                    .bound_params()
                    .iter()
                    .filter_map(|(n, &v)| s.graph.grad(v).map(|g| (n.clone(), g)))
                    .collect();
                let value = s.graph.value(loss).item().to_f64();
                (grads, s.take_bn_updates(), value)
            };
            if !loss.is_finite() {
                return Err(TrainError::NonFinite("training loss".into()));
            }
            opt.step(&mut model.store, &grads, lr, cfg.momentum, cfg.weight_decay);
            model.store.apply_bn_updates(&bn_updates, BN_MOMENTUM);
            loss_sum += loss;
        }
        let eval = if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 {
            let r = evaluate_model(model, data, Metric::Cosine, 64)?;
            Some(EvalSnapshot {
                map: r.map,
                rank1: r.rank1(),
            })
        } else {
            None
        };
        log.epochs.push(EpochLog {
            epoch: epoch + 1,
            loss: loss_sum / batches.len() as f64,
            lr,
            eval,
        });
    }
    Ok(log)
}

/// Train all weights on the dataset's training split.
pub fn train<T: Element>(model: &mut Model<T>, data: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    train_scoped(model, data, cfg, &FULL)
}

/// Mean training loss over one deterministic, unaugmented pass with batch
/// statistics, without updating anything.
pub fn training_loss<T: Element>(model: &Model<T>, data: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    cfg.validate()?;
    check_classifier(model, data)?;
    let (by_label, labels) = labelled_train_indices(data);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batches = pk_batches(&by_label, cfg.p_ids, cfg.k_instances, &mut rng);
    if batches.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut total = 0.0;
    for batch in &batches {
        let mut s = Session::with_graph(&model.store, Graph::inference(), Mode::Train);
        let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
        let loss = batch_loss(model, &mut s, data.batch(batch), &y, cfg)?;
        total += s.graph.value(loss).item().to_f64();
    }
    Ok(total / batches.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub classifier_step: TrainLog,
    pub full_step: TrainLog,
}

/// Transfer to a new label set: re-initialize the classifier for the
/// target's training identities, train only the classifier (backbone and
/// batch-norm statistics frozen), then train all weights.
pub fn finetune_two_step<T: Element>(
    model: &mut Model<T>,
    target: &Dataset,
    cfg1: &TrainConfig,
    cfg2: &TrainConfig,
) -> Result<FinetuneLog> {
    let n = target.num_train_ids();
    if n == 0 {
        return Err(TrainError::EmptyDataset);
    }
    model.reset_classifier(n, cfg1.seed);
    let classifier_step = finetune_classifier(model, target, cfg1)?;
    let full_step = train(model, target, cfg2)?;
    Ok(FinetuneLog {
        classifier_step,
        full_step,
    })
}

/// Step one of [`finetune_two_step`] on its own.
pub fn finetune_classifier<T: Element>(model: &mut Model<T>, target: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    train_scoped(model, target, cfg, &CLASSIFIER_ONLY)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_n() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[3, 5]));
        let l = cross_entropy_ls(&mut g, x, &[0, 1, 4], 0.0).unwrap();
        assert!((g.value(l).item() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[1, 3]));
        assert!(cross_entropy_ls(&mut g, x, &[3], 0.1).is_err());
    }

    #[test]
    fn warmup_then_decay() {
        let cfg = TrainConfig {
            base_lr: 1.0,
            warmup_epochs: 10,
            lr_milestones: vec![40, 70],
            ..TrainConfig::default()
        };
        assert!((cfg.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at(5) - 0.55).abs() < 1e-12);
        assert_eq!(cfg.lr_at(10), 1.0);
        assert!((cfg.lr_at(45) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at(80) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn pk_batches_are_balanced() {
        let by_id: BTreeMap<usize, Vec<usize>> = (0..5).map(|l| (l, (l * 10..l * 10 + 9).collect())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batches = pk_batches(&by_id, 2, 4, &mut rng);
        // 5 ids × 2 chunks = 10 chunks, consumed 2 at a time
        assert_eq!(batches.len(), 5);
        for b in &batches {
            let ids: std::collections::BTreeSet<usize> = b.iter().map(|i| i / 10).collect();
            assert_eq!((b.len(), ids.len()), (8, 2));
        }
    }

    #[test]
    fn identity_augmentation() {
        let img: Vec<f32> = (0..2 * 4 * 3).map(|v| v as f32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&img, (4, 3), &AugmentConfig::identity(), &mut rng), img);
    }

    #[test]
    fn config_rejects_bad_margin() {
        let cfg = TrainConfig {
            circle_m: 1.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
